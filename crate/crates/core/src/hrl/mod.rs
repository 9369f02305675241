//! High-level policy: latent-plan transitions relabeled with hindsight goals
//! and negatives, learned with conservative Q-learning and an actor
//! initialised from the plan prior.

mod cql;
mod critic;
mod goals;
mod train;

use thiserror::Error;

use crate::env::Observation;
use crate::lmp::LmpError;
use crate::numcore::NumError;

pub use cql::{
    actor_candidates, bc_loss, bc_warmstart, bellman_target, bootstrap_targets, build_transition, cql_actor_loss,
    cql_critic_loss, encode_windows, uniform_candidates, ActorLossParts, CqlNoise, EntropyTuner,
};
pub use critic::{
    conservative_critic_loss, soft_update, Candidates, Critic, CriticLossParts, CriticShape, TransitionBatch,
};
pub use goals::{relabel, sample_goal, sample_offset, GoalBranch, GoalSample, GoalSamplerConfig};
pub use train::{
    build_pool, read_hrl_log, train_hrl, GuardState, HrlBundle, HrlLogRow, HrlTrainConfig, PoolEntry, TransitionPool,
    HRL_LOG_HEADER,
};

#[derive(Debug, Error)]
pub enum HrlError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Lmp(#[from] LmpError),
    #[error("non-finite {what} at step {step}; batch: {batch}")]
    NonFinite { what: String, step: usize, batch: String },
    #[error("diverged at step {step}: critic loss {loss} exceeds 10x the initial {initial} for 3 windows")]
    Divergence { step: usize, loss: f64, initial: f64 },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

/// Relabeled high-level transition `(s_t, z_t, s_{t+k-1}, s_g, r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanTransition {
    pub s_t: Observation,
    pub z: Vec<f64>,
    /// Log-density of `z` under the encoder posterior it was sampled from.
    pub z_log_density: f64,
    pub s_next: Observation,
    pub s_g: Observation,
    pub reward: f64,
    /// Equal to `reward == 1`: reaching the goal ends the episode.
    pub terminal: bool,
}

impl PlanTransition {
    pub fn batch(items: &[PlanTransition]) -> TransitionBatch {
        let ad = items.first().map_or(0, |t| t.z.len());
        TransitionBatch {
            rows: items.len(),
            action_dim: ad,
            s: items.iter().flat_map(|t| t.s_t.0).collect(),
            a: items.iter().flat_map(|t| t.z.iter().copied()).collect(),
            a_log_density: items.iter().map(|t| t.z_log_density).collect(),
            s_next: items.iter().flat_map(|t| t.s_next.0).collect(),
            goal: items.iter().flat_map(|t| t.s_g.0).collect(),
            reward: items.iter().map(|t| t.reward).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CqlHyperParams {
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub entropy_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub cql_alpha: f64,
    /// Uniform and policy samples (each) in the logsumexp.
    pub n_samples: usize,
    pub bc_epochs: usize,
    pub target_entropy: f64,
    pub initial_entropy_coef: f64,
    /// Clamp bootstrapped targets to `[0, 1]`.
    pub clip_targets: bool,
    pub batch: usize,
    pub critic: CriticShape,
}

impl Default for CqlHyperParams {
    fn default() -> Self {
        Self {
            critic_lr: 3e-4,
            actor_lr: 1e-4,
            entropy_lr: 3e-4,
            gamma: 0.95,
            tau: 0.005,
            cql_alpha: 1.0,
            n_samples: 4,
            bc_epochs: 5,
            target_entropy: -16.0,
            initial_entropy_coef: 1.0,
            clip_targets: false,
            batch: 64,
            critic: CriticShape::default(),
        }
    }
}

impl CqlHyperParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.batch == 0 || self.initial_entropy_coef <= 0.0 {
            return Err("batch must be >= 1 and the initial entropy coefficient positive".into());
        }
        Ok(())
    }
}
