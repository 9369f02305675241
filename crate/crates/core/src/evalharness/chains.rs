//! Evaluation specs: start states and goal observations scripted by the
//! noise-free controller.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CHAIN_LEN, SUBTASK_BUDGET, TWO_TASK_BUDGET};
use crate::env::{
    dist, drive_affordance, random_table_point, Affordance, Controller, ControllerConfig, EnvState, Observation,
    TaskPredicate,
};

/// Steps the oracle may spend on one task while scripting goals.
const ORACLE_BUDGET: usize = 200;
/// Minimum effector displacement of the retreat in the hard protocol.
const RETREAT_MIN: f64 = 0.4;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Five sub-goals queried in a row.
    Chain5,
    /// One goal observation implying two tasks.
    SingleGoalTwoTask,
    /// Single tasks whose goal shows the effector retreated.
    Hard,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Chain5 => "chain5",
            Protocol::SingleGoalTwoTask => "single-goal-2task",
            Protocol::Hard => "hard",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chain5" => Ok(Protocol::Chain5),
            "single-goal-2task" => Ok(Protocol::SingleGoalTwoTask),
            "hard" => Ok(Protocol::Hard),
            _ => Err(format!("unknown protocol '{s}' (expected chain5, single-goal-2task or hard)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecMode {
    /// Sub-goals one after another, each with its own step budget.
    Sequential,
    /// All tasks share one goal and one budget.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Subgoal {
    pub task: TaskPredicate,
    pub goal: Observation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    pub id: usize,
    pub start: EnvState,
    pub subgoals: Vec<Subgoal>,
    pub mode: SpecMode,
    pub subtask_budget: usize,
    pub total_budget: usize,
}

/// Drive the oracle until `task` holds. `None` if it has no behaviour for
/// the task here or runs out of steps.
pub fn oracle_complete<R: Rng>(state: &EnvState, task: &TaskPredicate, rng: &mut R) -> Option<EnvState> {
    let aff = Affordance::for_task(task, state, rng)?;
    let ctrl = Controller::new(ControllerConfig::oracle());
    let init = state.observe();
    let mut s = *state;
    drive_affordance(&mut s, &aff, &ctrl, rng, ORACLE_BUDGET, |_, _| {});
    task.evaluate(&init, &s.observe()).then_some(s)
}

fn candidate_tasks<R: Rng>(state: &EnvState, rng: &mut R, with_block: bool) -> Vec<TaskPredicate> {
    if state.held {
        return vec![TaskPredicate::PlaceBlock { zone: random_table_point(rng) }];
    }
    let o = state.observe();
    TaskPredicate::SIMPLE
        .iter()
        .copied()
        .filter(|t| with_block || *t != TaskPredicate::LiftBlock)
        .filter(|t| !t.evaluate(&o, &o))
        .collect()
}

fn next_task<R: Rng>(state: &EnvState, rng: &mut R, with_block: bool) -> Option<(TaskPredicate, EnvState)> {
    for _ in 0..MAX_ATTEMPTS {
        let tasks = candidate_tasks(state, rng, with_block);
        let task = *tasks.choose(rng)?;
        if let Some(s) = oracle_complete(state, &task, rng) {
            return Some((task, s));
        }
    }
    None
}

fn chain<R: Rng>(id: usize, rng: &mut R) -> Option<ChainSpec> {
    let start = EnvState::reset(rng);
    let mut s = start;
    let mut subgoals = Vec::with_capacity(CHAIN_LEN);
    for _ in 0..CHAIN_LEN {
        let (task, next) = next_task(&s, rng, true)?;
        subgoals.push(Subgoal { task, goal: next.observe() });
        s = next;
    }
    Some(ChainSpec {
        id,
        start,
        subgoals,
        mode: SpecMode::Sequential,
        subtask_budget: SUBTASK_BUDGET,
        total_budget: SUBTASK_BUDGET * CHAIN_LEN,
    })
}

fn two_task<R: Rng>(id: usize, rng: &mut R) -> Option<ChainSpec> {
    let start = EnvState::reset(rng);
    let init = start.observe();
    let (first, mid) = next_task(&start, rng, false)?;
    let (second, end) = next_task(&mid, rng, false)?;
    let goal = end.observe();
    // the final goal must still show the first task done
    if !first.evaluate(&init, &goal) {
        return None;
    }
    Some(ChainSpec {
        id,
        start,
        subgoals: vec![Subgoal { task: first, goal }, Subgoal { task: second, goal }],
        mode: SpecMode::Joint,
        subtask_budget: TWO_TASK_BUDGET,
        total_budget: TWO_TASK_BUDGET,
    })
}

fn hard<R: Rng>(id: usize, rng: &mut R) -> Option<ChainSpec> {
    let start = EnvState::reset(rng);
    let (task, mut s) = next_task(&start, rng, false)?;
    let here = s.effector();
    let target = loop {
        let p = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
        if dist(p, here) >= RETREAT_MIN {
            break p;
        }
    };
    let ctrl = Controller::new(ControllerConfig::oracle());
    drive_affordance(&mut s, &Affordance::Reach { target }, &ctrl, rng, ORACLE_BUDGET, |_, _| {});
    let goal = s.observe();
    if !task.evaluate(&start.observe(), &goal) {
        return None;
    }
    Some(ChainSpec {
        id,
        start,
        subgoals: vec![Subgoal { task, goal }],
        mode: SpecMode::Sequential,
        subtask_budget: SUBTASK_BUDGET,
        total_budget: SUBTASK_BUDGET,
    })
}

/// `n` specs for `protocol`. Spec `i` depends only on `(seed, i)`.
pub fn generate_specs(protocol: Protocol, n: usize, seed: u64) -> Vec<ChainSpec> {
    (0..n)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64 + 1);
            loop {
                let spec = match protocol {
                    Protocol::Chain5 => chain(id, &mut rng),
                    Protocol::SingleGoalTwoTask => two_task(id, &mut rng),
                    Protocol::Hard => hard(id, &mut rng),
                };
                if let Some(s) = spec {
                    break s;
                }
            }
        })
        .collect()
}
