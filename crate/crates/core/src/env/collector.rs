//! Scripted play: a noisy proportional controller cycling through random
//! affordances, standing in for teleoperated play data.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    dist, EnvAction, EnvState, Observation, TaskPredicate, BUTTON, DRAWER_HANDLE_X, GRIPPER_CLOSED, GRIPPER_OPEN,
    HANDLE_BASE, HANDLE_TRAVEL, INTERACT_RADIUS, MAX_DELTA, SLIDER_HANDLE_Y, TABLE_MAX, TABLE_MIN,
};
use crate::datastore::EpisodeRecord;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Affordance {
    Reach { target: (f64, f64) },
    OpenDrawer { target: f64 },
    CloseDrawer { target: f64 },
    SliderLeft { target: f64 },
    SliderRight { target: f64 },
    PressButton,
    PickBlock,
    PlaceBlock { target: (f64, f64) },
}

impl Affordance {
    pub const LABELS: [&'static str; 8] = [
        "reach",
        "open-drawer",
        "close-drawer",
        "slider-left",
        "slider-right",
        "press-button",
        "pick-block",
        "place-block",
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Affordance::Reach { .. } => "reach",
            Affordance::OpenDrawer { .. } => "open-drawer",
            Affordance::CloseDrawer { .. } => "close-drawer",
            Affordance::SliderLeft { .. } => "slider-left",
            Affordance::SliderRight { .. } => "slider-right",
            Affordance::PressButton => "press-button",
            Affordance::PickBlock => "pick-block",
            Affordance::PlaceBlock { .. } => "place-block",
        }
    }

    /// Random play behaviour. A held block is always placed next.
    pub fn sample<R: Rng>(state: &EnvState, rng: &mut R) -> Self {
        if state.held {
            return Affordance::PlaceBlock { target: random_table_point(rng) };
        }
        match rng.random_range(0..7) {
            0 => Affordance::Reach { target: (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)) },
            1 => Affordance::OpenDrawer { target: rng.random_range(0.85..1.0) },
            2 => Affordance::CloseDrawer { target: rng.random_range(0.0..0.15) },
            3 => Affordance::SliderLeft { target: rng.random_range(0.0..0.15) },
            4 => Affordance::SliderRight { target: rng.random_range(0.85..1.0) },
            5 => Affordance::PressButton,
            _ => Affordance::PickBlock,
        }
    }

    /// Behaviour that solves `task` from `state`, if any.
    pub fn for_task<R: Rng>(task: &TaskPredicate, state: &EnvState, rng: &mut R) -> Option<Self> {
        Some(match task {
            TaskPredicate::OpenDrawer => Affordance::OpenDrawer { target: rng.random_range(0.85..1.0) },
            TaskPredicate::CloseDrawer => Affordance::CloseDrawer { target: rng.random_range(0.0..0.15) },
            TaskPredicate::SliderLeft => Affordance::SliderLeft { target: rng.random_range(0.0..0.15) },
            TaskPredicate::SliderRight => Affordance::SliderRight { target: rng.random_range(0.85..1.0) },
            TaskPredicate::LightOn | TaskPredicate::LightOff => Affordance::PressButton,
            TaskPredicate::LiftBlock if !state.held => Affordance::PickBlock,
            TaskPredicate::PlaceBlock { zone } if state.held => Affordance::PlaceBlock { target: *zone },
            _ => return None,
        })
    }

    /// Whether a segment of this kind ends with the gripper released.
    pub fn releases(&self) -> bool {
        !matches!(self, Affordance::PickBlock)
    }
}

impl fmt::Display for Affordance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn random_table_point<R: Rng>(rng: &mut R) -> (f64, f64) {
    (rng.random_range(TABLE_MIN..TABLE_MAX), rng.random_range(TABLE_MIN..TABLE_MAX))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerConfig {
    pub gain: f64,
    pub noise_std: f64,
    /// Distance at which a reach phase is considered done.
    pub reach_tolerance: f64,
    /// Tolerance on drawer/slider openness for drag phases.
    pub drag_tolerance: f64,
    /// Step cap for any single phase.
    pub phase_limit: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { gain: 0.5, noise_std: 0.005, reach_tolerance: 0.01, drag_tolerance: 0.01, phase_limit: 40 }
    }
}

impl ControllerConfig {
    /// Noise-free controller used to script evaluation goals.
    pub fn oracle() -> Self {
        Self { noise_std: 0.0, ..Self::default() }
    }
}

/// Proportional controller with additive Gaussian action noise.
pub struct Controller {
    pub cfg: ControllerConfig,
    noise: Option<Normal<f64>>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Self {
        let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("valid noise std"));
        Self { cfg, noise }
    }

    pub fn act<R: Rng>(&self, state: &EnvState, target: (f64, f64), gripper: f64, rng: &mut R) -> EnvAction {
        let mut dx = self.cfg.gain * (target.0 - state.x);
        let mut dy = self.cfg.gain * (target.1 - state.y);
        if let Some(n) = &self.noise {
            dx += n.sample(rng);
            dy += n.sample(rng);
        }
        EnvAction::new(dx.clamp(-MAX_DELTA, MAX_DELTA), dy.clamp(-MAX_DELTA, MAX_DELTA), gripper)
    }
}

/// Step budget tracker shared by the phases of one behaviour.
struct Driver<'a, R, F> {
    state: &'a mut EnvState,
    ctrl: &'a Controller,
    rng: &'a mut R,
    budget: usize,
    used: usize,
    record: F,
}

impl<R: Rng, F: FnMut(&Observation, &EnvAction)> Driver<'_, R, F> {
    fn exhausted(&self) -> bool {
        self.used >= self.budget
    }

    fn apply(&mut self, action: EnvAction) {
        let obs = self.state.observe();
        (self.record)(&obs, &action);
        *self.state = self.state.step(&action);
        self.used += 1;
    }

    fn move_to(&mut self, target: impl Fn(&EnvState) -> (f64, f64), gripper: f64) {
        for _ in 0..self.ctrl.cfg.phase_limit {
            if self.exhausted() || dist(self.state.effector(), target(self.state)) < self.ctrl.cfg.reach_tolerance {
                return;
            }
            let a = self.ctrl.act(self.state, target(self.state), gripper, self.rng);
            self.apply(a);
        }
    }

    fn set_gripper(&mut self, gripper: f64) {
        if self.exhausted() {
            return;
        }
        let here = self.state.effector();
        let a = self.ctrl.act(self.state, here, gripper, self.rng);
        self.apply(a);
    }

    fn drag(&mut self, handle: impl Fn(&EnvState) -> (f64, f64), goal: (f64, f64), done: impl Fn(&EnvState) -> bool) {
        for _ in 0..self.ctrl.cfg.phase_limit {
            if self.exhausted() || done(self.state) || dist(self.state.effector(), handle(self.state)) > INTERACT_RADIUS
            {
                return;
            }
            let a = self.ctrl.act(self.state, goal, GRIPPER_CLOSED, self.rng);
            self.apply(a);
        }
    }
}

/// Execute one behaviour from `state`, calling `record` with every
/// `(observation, action)` pair before the action is applied. Returns the
/// number of steps taken, never more than `budget`.
pub fn drive_affordance<R: Rng>(
    state: &mut EnvState,
    affordance: &Affordance,
    ctrl: &Controller,
    rng: &mut R,
    budget: usize,
    record: impl FnMut(&Observation, &EnvAction),
) -> usize {
    let mut d = Driver { state, ctrl, rng, budget, used: 0, record };
    let tol = ctrl.cfg.drag_tolerance;
    match *affordance {
        Affordance::Reach { target } => d.move_to(|_| target, GRIPPER_OPEN),
        Affordance::OpenDrawer { target } | Affordance::CloseDrawer { target } => {
            d.move_to(EnvState::drawer_handle, GRIPPER_OPEN);
            d.set_gripper(GRIPPER_CLOSED);
            let goal = (DRAWER_HANDLE_X, HANDLE_BASE + HANDLE_TRAVEL * target);
            d.drag(EnvState::drawer_handle, goal, |s| (s.drawer - target).abs() < tol);
        }
        Affordance::SliderLeft { target } | Affordance::SliderRight { target } => {
            d.move_to(EnvState::slider_handle, GRIPPER_OPEN);
            d.set_gripper(GRIPPER_CLOSED);
            let goal = (HANDLE_BASE + HANDLE_TRAVEL * target, SLIDER_HANDLE_Y);
            d.drag(EnvState::slider_handle, goal, |s| (s.slider - target).abs() < tol);
        }
        Affordance::PressButton => {
            d.move_to(|_| BUTTON, GRIPPER_OPEN);
            d.set_gripper(GRIPPER_CLOSED);
        }
        Affordance::PickBlock => {
            d.move_to(EnvState::block, GRIPPER_OPEN);
            d.set_gripper(GRIPPER_CLOSED);
        }
        Affordance::PlaceBlock { target } => d.move_to(|_| target, GRIPPER_CLOSED),
    }
    if affordance.releases() {
        d.set_gripper(GRIPPER_OPEN);
    }
    d.used
}

/// One line of the affordance audit log: `episode,step_start,step_end,affordance`
/// with `step_end` exclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLog {
    pub episode: usize,
    pub step_start: usize,
    pub step_end: usize,
    pub affordance: &'static str,
}

impl SegmentLog {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.episode, self.step_start, self.step_end, self.affordance)
    }

    pub fn write_all(logs: &[SegmentLog]) -> String {
        logs.iter().map(|l| l.to_line() + "\n").collect()
    }
}

pub struct CollectedEpisode {
    pub record: EpisodeRecord,
    pub segments: Vec<SegmentLog>,
}

/// Roll the scripted play controller for `episodes` episodes of exactly
/// `steps_per_episode` steps each.
pub fn scripted_collect<R: Rng>(
    rng: &mut R,
    episodes: usize,
    steps_per_episode: usize,
    cfg: ControllerConfig,
) -> Vec<CollectedEpisode> {
    let ctrl = Controller::new(cfg);
    (0..episodes)
        .map(|ep| {
            let mut state = EnvState::reset(rng);
            let mut obs = Vec::with_capacity(steps_per_episode);
            let mut acts = Vec::with_capacity(steps_per_episode);
            let mut segments = Vec::new();
            while obs.len() < steps_per_episode {
                let aff = Affordance::sample(&state, rng);
                let start = obs.len();
                let budget = steps_per_episode - start;
                let mut used = drive_affordance(&mut state, &aff, &ctrl, rng, budget, |o, a| {
                    obs.push(*o);
                    acts.push(*a);
                });
                if used == 0 {
                    // behaviour already satisfied; idle one step so the loop always advances
                    let here = state.effector();
                    let a = ctrl.act(&state, here, state.gripper, rng);
                    obs.push(state.observe());
                    acts.push(a);
                    state = state.step(&a);
                    used = 1;
                }
                segments.push(SegmentLog {
                    episode: ep,
                    step_start: start,
                    step_end: start + used,
                    affordance: aff.label(),
                });
            }
            CollectedEpisode { record: EpisodeRecord::from_steps(ep as u32, &obs, &acts), segments }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_step_count_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = scripted_collect(&mut rng, 1, 1000, ControllerConfig::default());
        assert_eq!(eps[0].record.len(), 1000);
        // stored values are f32-rounded, so the bound is the rounded clip
        let bound = MAX_DELTA as f32 as f64;
        for t in 0..1000 {
            let a = eps[0].record.action(t);
            assert!(a[0].abs() <= bound && a[1].abs() <= bound);
            assert!(a[2] == GRIPPER_OPEN || a[2] == GRIPPER_CLOSED);
        }
        let segs = &eps[0].segments;
        assert_eq!(segs.first().unwrap().step_start, 0);
        assert_eq!(segs.last().unwrap().step_end, 1000);
        for w in segs.windows(2) {
            assert_eq!(w[0].step_end, w[1].step_start);
        }
    }

    #[test]
    fn oracle_solves_every_simple_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctrl = Controller::new(ControllerConfig::oracle());
        for trial in 0..50 {
            let mut s = EnvState::reset(&mut rng);
            for task in TaskPredicate::SIMPLE {
                let init = s.observe();
                if task.evaluate(&init, &init) {
                    continue;
                }
                let aff = Affordance::for_task(&task, &s, &mut rng).unwrap();
                drive_affordance(&mut s, &aff, &ctrl, &mut rng, 200, |_, _| {});
                assert!(task.evaluate(&init, &s.observe()), "trial {trial}: {task} failed");
                if s.held {
                    let place = Affordance::PlaceBlock { target: random_table_point(&mut rng) };
                    drive_affordance(&mut s, &place, &ctrl, &mut rng, 200, |_, _| {});
                }
            }
        }
    }
}
