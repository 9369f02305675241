//! Flat comparison methods: goal-conditioned imitation with the latent-plan
//! model alone, and conservative Q-learning over primitive actions.

mod flat;

use crate::evalharness::{PlanPolicy, PlanSource};
use crate::lmp::LmpBundle;

pub use flat::{
    build_flat_transitions, flat_actor_loss, flat_critic_loss, gumbel_noise, relaxed_gripper, temperature_at,
    train_flat_cql, FlatActor, FlatBundle, FlatCqlConfig, FlatCqlNoise, FlatCqlPolicy, FlatNoise, FlatTransition,
    FLAT_LOG_HEADER,
};

/// LMP inference: every 15 steps sample a squashed plan from the prior,
/// then decode greedily.
pub fn lmp_inference_policy(bundle: &LmpBundle) -> PlanPolicy {
    PlanPolicy::new("lmp", bundle.decoder.clone(), PlanSource::PriorSample(bundle.prior.clone()))
}
