pub mod baselines;
pub mod cli;
pub mod datastore;
pub mod env;
pub mod evalharness;
pub mod hrl;
pub mod lmp;
pub mod numcore;
