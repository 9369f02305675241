//! Goal-conditioned rollouts over sub-goal chains, with per-position
//! success rates and average completed length.

mod chains;
mod report;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvAction, EnvState, Observation, TaskPredicate, GRIPPER_CLOSED, GRIPPER_OPEN, MAX_DELTA};
use crate::hrl::HrlBundle;
use crate::lmp::{DecodeMode, DecoderHidden, LmpBundle, PlanDecoder, PlanPrior};
use crate::numcore::dist::gaussian_sample_tanh;
use crate::numcore::NumError;

pub use chains::{generate_specs, oracle_complete, ChainSpec, Protocol, SpecMode, Subgoal};
pub use report::{emit_report, load_report, summarize, EvalRow, EvalSummary, REPORT_HEADER};

/// Plan-based policies draw a fresh plan every this many steps.
pub const REPLAN_INTERVAL: usize = 15;
pub const SUBTASK_BUDGET: usize = 90;
pub const TWO_TASK_BUDGET: usize = 150;
pub const CHAIN_LEN: usize = 5;

/// A batched goal-conditioned controller. Row `r` of every call refers to
/// the same rollout.
pub trait Policy {
    fn method(&self) -> &str;
    /// Start `rows` fresh rollouts.
    fn reset(&mut self, rows: usize);
    /// The goal of these rows changed.
    fn restart(&mut self, rows: &[usize]);
    fn act(
        &mut self,
        obs: &[Observation],
        goals: &[Observation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EnvAction>, NumError>;
}

/// Where a [`PlanPolicy`] gets its plans.
#[derive(Clone, Debug)]
pub enum PlanSource {
    /// Squashed mean of the high-level actor.
    ActorMean(PlanPrior),
    /// Squashed sample from the plan prior.
    PriorSample(PlanPrior),
    /// Uniform plans on `(-1, 1)^dim`, a control.
    Random { dim: usize },
}

/// Replans every [`REPLAN_INTERVAL`] steps and decodes greedily in between.
#[derive(Clone, Debug)]
pub struct PlanPolicy {
    method: String,
    decoder: PlanDecoder,
    source: PlanSource,
    hidden: DecoderHidden,
    counters: Vec<usize>,
    plans: Vec<Vec<f64>>,
    /// Total number of plans drawn since the last reset.
    pub replans: usize,
}

impl PlanPolicy {
    pub fn new(method: &str, decoder: PlanDecoder, source: PlanSource) -> Self {
        let hidden = decoder.initial_hidden(0);
        Self { method: method.into(), decoder, source, hidden, counters: Vec::new(), plans: Vec::new(), replans: 0 }
    }

    /// Rows that draw a new plan on their next step.
    pub fn due(&self) -> Vec<usize> {
        (0..self.counters.len()).filter(|&r| self.counters[r].is_multiple_of(REPLAN_INTERVAL)).collect()
    }

    fn plan(&self, cur: &[Observation], goal: &[Observation], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, NumError> {
        Ok(match &self.source {
            PlanSource::ActorMean(actor) => actor.distribution(cur, goal)?.iter().map(|d| d.squashed_mean()).collect(),
            PlanSource::PriorSample(prior) => {
                prior.distribution(cur, goal)?.iter().map(|d| gaussian_sample_tanh(d, rng).0).collect()
            }
            PlanSource::Random { dim } => {
                cur.iter().map(|_| (0..*dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
            }
        })
    }
}

impl Policy for PlanPolicy {
    fn method(&self) -> &str {
        &self.method
    }

    fn reset(&mut self, rows: usize) {
        self.hidden = self.decoder.initial_hidden(rows);
        self.counters = vec![0; rows];
        self.plans = vec![Vec::new(); rows];
        self.replans = 0;
    }

    fn restart(&mut self, rows: &[usize]) {
        for &r in rows {
            self.counters[r] = 0;
        }
    }

    fn act(
        &mut self,
        obs: &[Observation],
        goals: &[Observation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EnvAction>, NumError> {
        let due = self.due();
        if !due.is_empty() {
            let cur: Vec<Observation> = due.iter().map(|&r| obs[r]).collect();
            let goal: Vec<Observation> = due.iter().map(|&r| goals[r]).collect();
            for (&r, z) in due.iter().zip(self.plan(&cur, &goal, rng)?) {
                self.plans[r] = z;
            }
            self.hidden.reset_rows(&due);
            self.replans += due.len();
        }
        for c in &mut self.counters {
            *c += 1;
        }
        self.decoder.act(obs, &self.plans, &mut self.hidden, DecodeMode::Greedy, rng)
    }
}

/// TACO-RL at evaluation: plans from the actor mean, decoded by the frozen
/// low-level policy.
pub fn taco_policy(hrl: &HrlBundle, lmp: &LmpBundle) -> PlanPolicy {
    PlanPolicy::new("taco", lmp.decoder.clone(), PlanSource::ActorMean(hrl.actor.clone()))
}

/// Plans drawn uniformly at random, decoded by the low-level policy.
pub fn random_plan_policy(lmp: &LmpBundle) -> PlanPolicy {
    PlanPolicy::new("random-plan", lmp.decoder.clone(), PlanSource::Random { dim: lmp.hp.latent_dim })
}

/// Uniform primitive actions, a control.
#[derive(Clone, Debug, Default)]
pub struct RandomActionPolicy;

impl Policy for RandomActionPolicy {
    fn method(&self) -> &str {
        "random-action"
    }

    fn reset(&mut self, _rows: usize) {}

    fn restart(&mut self, _rows: &[usize]) {}

    fn act(
        &mut self,
        obs: &[Observation],
        _goals: &[Observation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EnvAction>, NumError> {
        Ok(obs
            .iter()
            .map(|_| {
                let g = if rng.random_bool(0.5) { GRIPPER_CLOSED } else { GRIPPER_OPEN };
                EnvAction::new(rng.random_range(-MAX_DELTA..MAX_DELTA), rng.random_range(-MAX_DELTA..MAX_DELTA), g)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Visited observations, starting with the initial one.
    pub observations: Vec<Observation>,
    pub success: bool,
    pub steps: usize,
}

/// Single goal-conditioned rollout that stops on success or after `budget`
/// steps.
pub fn rollout<P: Policy + ?Sized>(
    policy: &mut P,
    start: EnvState,
    goal: Observation,
    task: &TaskPredicate,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout, NumError> {
    policy.reset(1);
    let init = start.observe();
    let mut state = start;
    let mut observations = vec![init];
    let mut steps = 0;
    let mut success = task.evaluate(&init, &init);
    while !success && steps < budget {
        let a = policy.act(&[state.observe()], &[goal], rng)?;
        state = state.step(&a[0]);
        steps += 1;
        let o = state.observe();
        observations.push(o);
        success = task.evaluate(&init, &o);
    }
    Ok(Rollout { observations, success, steps })
}

/// Hierarchical rollout: actor plans every [`REPLAN_INTERVAL`] steps,
/// greedy decoding in between.
pub fn rollout_hierarchical(
    hrl: &HrlBundle,
    lmp: &LmpBundle,
    start: EnvState,
    goal: Observation,
    task: &TaskPredicate,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout, NumError> {
    rollout(&mut taco_policy(hrl, lmp), start, goal, task, budget, rng)
}

/// Outcome of one spec: per-position success and steps spent there.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecOutcome {
    pub chain_id: usize,
    pub success: Vec<bool>,
    pub steps_used: Vec<usize>,
    pub tasks: Vec<String>,
}

impl SpecOutcome {
    /// Successes before the first failure.
    pub fn prefix_len(&self) -> usize {
        self.success.iter().take_while(|&&s| s).count()
    }
}

struct Row {
    state: EnvState,
    init: Observation,
    pos: usize,
    used: usize,
    done: bool,
    // joint mode: tasks seen satisfied at any step
    seen: Vec<bool>,
}

/// Run every spec as one row of a batched rollout.
pub fn run_specs<P: Policy + ?Sized>(
    policy: &mut P,
    specs: &[ChainSpec],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SpecOutcome>, NumError> {
    policy.reset(specs.len());
    let mut outs: Vec<SpecOutcome> = specs
        .iter()
        .map(|s| SpecOutcome {
            chain_id: s.id,
            success: Vec::with_capacity(s.subgoals.len()),
            steps_used: Vec::with_capacity(s.subgoals.len()),
            tasks: s.subgoals.iter().map(|g| g.task.name()).collect(),
        })
        .collect();
    let mut rows: Vec<Row> = specs
        .iter()
        .map(|s| Row {
            state: s.start,
            init: s.start.observe(),
            pos: 0,
            used: 0,
            done: s.subgoals.is_empty(),
            seen: vec![false; s.subgoals.len()],
        })
        .collect();

    // settles rows whose current condition holds without acting
    let settle = |rows: &mut [Row], outs: &mut [SpecOutcome], restarts: &mut Vec<usize>| {
        for (r, (row, spec)) in rows.iter_mut().zip(specs).enumerate() {
            while !row.done {
                let o = row.state.observe();
                match spec.mode {
                    SpecMode::Sequential => {
                        let g = &spec.subgoals[row.pos];
                        let hit = g.task.evaluate(&row.init, &o);
                        if !hit && row.used < spec.subtask_budget {
                            break;
                        }
                        outs[r].success.push(hit);
                        outs[r].steps_used.push(row.used);
                        row.pos += 1;
                        row.used = 0;
                        row.init = o;
                        row.done = row.pos == spec.subgoals.len();
                        restarts.push(r);
                    }
                    SpecMode::Joint => {
                        let now: Vec<bool> = spec.subgoals.iter().map(|g| g.task.evaluate(&row.init, &o)).collect();
                        for (s, n) in row.seen.iter_mut().zip(&now) {
                            *s |= *n;
                        }
                        let all = now.iter().all(|&b| b);
                        if !all && row.used < spec.total_budget {
                            break;
                        }
                        // position i succeeds when at least i tasks were achieved
                        let achieved = if all { now.len() } else { row.seen.iter().filter(|&&s| s).count() };
                        for i in 0..now.len() {
                            outs[r].success.push(i < achieved);
                            outs[r].steps_used.push(row.used);
                        }
                        row.done = true;
                    }
                }
            }
        }
    };

    let mut restarts = Vec::new();
    settle(&mut rows, &mut outs, &mut restarts);
    while rows.iter().any(|r| !r.done) {
        restarts.clear();
        let obs: Vec<Observation> = rows.iter().map(|r| r.state.observe()).collect();
        let goals: Vec<Observation> =
            rows.iter().zip(specs).map(|(r, s)| s.subgoals[r.pos.min(s.subgoals.len() - 1)].goal).collect();
        let actions = policy.act(&obs, &goals, rng)?;
        for (row, a) in rows.iter_mut().zip(&actions) {
            if !row.done {
                row.state = row.state.step(a);
                row.used += 1;
            }
        }
        settle(&mut rows, &mut outs, &mut restarts);
        if !restarts.is_empty() {
            policy.restart(&restarts);
        }
    }
    Ok(outs)
}
