//! Numerical core: reverse-mode differentiation, Adam, distributions and
//! parameter checkpoints. Everything is `f64`.

pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use dist::{GaussianParams, GaussianVars, LogisticMixtureParams};
pub use graph::{Graph, Var};
pub use optim::AdamState;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a (1, 1) scalar, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}
