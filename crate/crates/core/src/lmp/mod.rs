//! Latent-plan imitation: sequence encoder q(z|τ), goal-conditioned prior
//! p(z|s_c, s_g) and a recurrent action decoder π(a|s, z), trained on the
//! β-weighted ELBO with balanced KL.

mod loss;
mod model;
mod train;

use thiserror::Error;

use crate::env::{EnvAction, ACT_DIM, GRIPPER_CLOSED, GRIPPER_OPEN, MAX_DELTA, OBS_DIM};
use crate::numcore::nn::CellKind;
use crate::numcore::NumError;

pub use loss::{lmp_loss, window_noise, LmpLossParts};
pub use model::{DecodeMode, DecoderHidden, LmpBundle, PlanDecoder, PlanEncoder, PlanPrior, StateEmbedder};
pub use train::{read_lmp_log, train_lmp, LmpLogRow, LmpTrainConfig, LMP_LOG_HEADER};

#[derive(Debug, Error)]
pub enum LmpError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("non-finite loss on window {0}")]
    NonFinite(String),
    #[error("diverged at epoch {epoch}: mean loss {loss} exceeds 10x the initial {initial} for 3 epochs")]
    Divergence { epoch: usize, loss: f64, initial: f64 },
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmpHyperParams {
    pub beta: f64,
    pub kl_alpha: f64,
    pub batch: usize,
    pub lr: f64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub model_width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub blocks: usize,
    pub prior_width: usize,
    pub prior_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub cell: CellKind,
    pub components: usize,
    pub bins: usize,
}

impl Default for LmpHyperParams {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            kl_alpha: 0.8,
            batch: 64,
            lr: 1e-4,
            latent_dim: 16,
            embed_dim: 32,
            model_width: 64,
            heads: 2,
            ff_width: 128,
            blocks: 2,
            prior_width: 64,
            prior_layers: 3,
            decoder_hidden: 128,
            decoder_layers: 2,
            cell: CellKind::Gru,
            components: 10,
            bins: 256,
        }
    }
}

impl LmpHyperParams {
    /// Continuous action dims handled by the mixture head; the last action
    /// dim is the gripper.
    pub fn mixture_dims(&self) -> usize {
        ACT_DIM - 1
    }

    pub fn head_width(&self) -> usize {
        self.mixture_dims() * 3 * self.components + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.kl_alpha > 0.0 && self.kl_alpha < 1.0) {
            return Err(format!("kl_alpha must lie in (0, 1), got {}", self.kl_alpha));
        }
        if !self.model_width.is_multiple_of(self.heads.max(1)) || self.heads == 0 {
            return Err(format!("model_width {} is not divisible by heads {}", self.model_width, self.heads));
        }
        if self.batch == 0 || self.latent_dim == 0 || self.components == 0 || self.bins < 2 {
            return Err("batch, latent_dim, components must be >= 1 and bins >= 2".into());
        }
        Ok(())
    }
}

/// Network input features: positions and scene scalars mapped from [0, 1]
/// to [-1, 1]; the gripper (already ±1) passes through.
pub fn obs_features(rows: &[f64]) -> Vec<f64> {
    rows.iter().enumerate().map(|(i, v)| if i % OBS_DIM == 2 { *v } else { 2.0 * v - 1.0 }).collect()
}

/// Decoder targets for one recorded action: deltas scaled to [-1, 1] and
/// the gripper as a {0, 1} label.
pub fn action_targets(a: &[f64]) -> ([f64; 2], f64) {
    let s = |v: f64| (v / MAX_DELTA).clamp(-1.0, 1.0);
    ([s(a[0]), s(a[1])], if a[2] > 0.0 { 1.0 } else { 0.0 })
}

pub fn action_from_targets(d: [f64; 2], gripper_closed: bool) -> EnvAction {
    EnvAction::new(d[0] * MAX_DELTA, d[1] * MAX_DELTA, if gripper_closed { GRIPPER_CLOSED } else { GRIPPER_OPEN })
}
