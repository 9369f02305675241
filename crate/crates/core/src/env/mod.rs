//! Deterministic 2D play table: effector with a parallel gripper, a block, a
//! drawer, a slider and a light button.

mod collector;
mod tasks;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use collector::{
    drive_affordance, random_table_point, scripted_collect, Affordance, CollectedEpisode, Controller, ControllerConfig,
    SegmentLog,
};
pub use tasks::{TaskError, TaskPredicate};

pub const OBS_DIM: usize = 9;
pub const ACT_DIM: usize = 3;
pub const PROPRIO_DIM: usize = 3;
pub const SCENE_DIM: usize = 6;

/// Per-step limit on effector displacement along each axis.
pub const MAX_DELTA: f64 = 0.05;
/// Reach radius for every interaction.
pub const INTERACT_RADIUS: f64 = 0.03;
pub const DRAWER_HANDLE_X: f64 = 0.9;
pub const SLIDER_HANDLE_Y: f64 = 0.9;
pub const BUTTON: (f64, f64) = (0.5, 0.9);
/// Handle travel: handle coordinate = 0.1 + 0.3 * openness.
pub const HANDLE_TRAVEL: f64 = 0.3;
pub const HANDLE_BASE: f64 = 0.1;
/// Region where blocks are spawned and placed.
pub const TABLE_MIN: f64 = 0.15;
pub const TABLE_MAX: f64 = 0.75;

pub const GRIPPER_OPEN: f64 = -1.0;
pub const GRIPPER_CLOSED: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
    pub gripper: f64,
    pub bx: f64,
    pub by: f64,
    pub held: bool,
    pub drawer: f64,
    pub slider: f64,
    pub light: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvAction {
    pub dx: f64,
    pub dy: f64,
    pub gripper: f64,
}

impl EnvAction {
    pub fn new(dx: f64, dy: f64, gripper: f64) -> Self {
        Self { dx, dy, gripper }
    }

    /// Clip deltas to the action box. The gripper command is read by sign;
    /// zero or NaN keeps the current gripper state.
    pub fn sanitized(&self, current_gripper: f64) -> Self {
        let clip = |v: f64| if v.is_finite() { v.clamp(-MAX_DELTA, MAX_DELTA) } else { 0.0 };
        let gripper = if self.gripper > 0.0 {
            GRIPPER_CLOSED
        } else if self.gripper < 0.0 {
            GRIPPER_OPEN
        } else {
            current_gripper
        };
        Self { dx: clip(self.dx), dy: clip(self.dy), gripper }
    }

    pub fn to_array(&self) -> [f64; ACT_DIM] {
        [self.dx, self.dy, self.gripper]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self { dx: a[0], dy: a[1], gripper: a[2] }
    }
}

/// 9-vector `(x, y, g, bx, by, held, d, s, L)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn from_slice(v: &[f64]) -> Self {
        let mut a = [0.0; OBS_DIM];
        a.copy_from_slice(&v[..OBS_DIM]);
        Self(a)
    }

    pub fn proprio(&self) -> &[f64] {
        &self.0[..PROPRIO_DIM]
    }

    pub fn scene(&self) -> &[f64] {
        &self.0[PROPRIO_DIM..]
    }

    pub fn effector(&self) -> (f64, f64) {
        (self.0[0], self.0[1])
    }

    pub fn block(&self) -> (f64, f64) {
        (self.0[3], self.0[4])
    }

    pub fn held(&self) -> bool {
        self.0[5] > 0.5
    }

    pub fn drawer(&self) -> f64 {
        self.0[6]
    }

    pub fn slider(&self) -> f64 {
        self.0[7]
    }

    pub fn light(&self) -> bool {
        self.0[8] > 0.5
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Interaction {
    Block,
    Drawer,
    Slider,
    Button,
}

impl EnvState {
    pub fn drawer_handle(&self) -> (f64, f64) {
        (DRAWER_HANDLE_X, HANDLE_BASE + HANDLE_TRAVEL * self.drawer)
    }

    pub fn slider_handle(&self) -> (f64, f64) {
        (HANDLE_BASE + HANDLE_TRAVEL * self.slider, SLIDER_HANDLE_Y)
    }

    pub fn effector(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn block(&self) -> (f64, f64) {
        (self.bx, self.by)
    }

    pub fn gripper_closed(&self) -> bool {
        self.gripper > 0.0
    }

    pub fn observe(&self) -> Observation {
        Observation([
            self.x,
            self.y,
            self.gripper,
            self.bx,
            self.by,
            if self.held { 1.0 } else { 0.0 },
            self.drawer,
            self.slider,
            if self.light { 1.0 } else { 0.0 },
        ])
    }

    /// Inverse of [`EnvState::observe`] for observations produced by it.
    pub fn from_observation(o: &Observation) -> Self {
        Self {
            x: o.0[0],
            y: o.0[1],
            gripper: if o.0[2] > 0.0 { GRIPPER_CLOSED } else { GRIPPER_OPEN },
            bx: o.0[3],
            by: o.0[4],
            held: o.held(),
            drawer: o.0[6],
            slider: o.0[7],
            light: o.light(),
        }
    }

    /// Sample from the initial state distribution.
    pub fn reset<R: Rng>(rng: &mut R) -> Self {
        Self {
            x: rng.random_range(0.0..1.0),
            y: rng.random_range(0.0..1.0),
            gripper: GRIPPER_OPEN,
            bx: rng.random_range(TABLE_MIN..TABLE_MAX),
            by: rng.random_range(TABLE_MIN..TABLE_MAX),
            held: false,
            drawer: rng.random_range(0.0..1.0),
            slider: rng.random_range(0.0..1.0),
            light: rng.random_bool(0.5),
        }
    }

    /// Deterministic transition.
    ///
    /// Interactions are decided at the pre-move effector position, one per
    /// step, in priority order block > drawer > slider > button.
    pub fn step(&self, action: &EnvAction) -> Self {
        let a = action.sanitized(self.gripper);
        let mut next = *self;
        let closing = !self.gripper_closed() && a.gripper > 0.0;
        let closed = a.gripper > 0.0;
        next.gripper = a.gripper;
        next.x = (self.x + a.dx).clamp(0.0, 1.0);
        next.y = (self.y + a.dy).clamp(0.0, 1.0);
        let (mx, my) = (next.x - self.x, next.y - self.y);

        if self.held {
            if closed {
                next.bx = next.x;
                next.by = next.y;
            } else {
                next.held = false;
            }
            return next;
        }

        let here = self.effector();
        let interaction = [
            (Interaction::Block, closing && dist(here, self.block()) <= INTERACT_RADIUS),
            (Interaction::Drawer, closed && dist(here, self.drawer_handle()) <= INTERACT_RADIUS),
            (Interaction::Slider, closed && dist(here, self.slider_handle()) <= INTERACT_RADIUS),
            (Interaction::Button, closing && dist(here, BUTTON) <= INTERACT_RADIUS),
        ]
        .into_iter()
        .find(|(_, hit)| *hit)
        .map(|(i, _)| i);

        match interaction {
            Some(Interaction::Block) => {
                next.held = true;
                next.bx = next.x;
                next.by = next.y;
            }
            Some(Interaction::Drawer) => {
                next.drawer = (self.drawer + my / HANDLE_TRAVEL).clamp(0.0, 1.0);
            }
            Some(Interaction::Slider) => {
                next.slider = (self.slider + mx / HANDLE_TRAVEL).clamp(0.0, 1.0);
            }
            Some(Interaction::Button) => next.light = !self.light,
            None => {}
        }
        next
    }

    pub fn in_range(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x)
            && unit(self.y)
            && unit(self.bx)
            && unit(self.by)
            && unit(self.drawer)
            && unit(self.slider)
            && (self.gripper == GRIPPER_OPEN || self.gripper == GRIPPER_CLOSED)
            && (!self.held || (self.bx == self.x && self.by == self.y))
    }
}
