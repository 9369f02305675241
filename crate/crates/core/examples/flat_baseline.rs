//! Flat goal-conditioned CQL with hindsight relabeling over primitive
//! actions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taco_rl::baselines::{train_flat_cql, FlatCqlConfig, FlatCqlPolicy};
use taco_rl::datastore::Dataset;
use taco_rl::env::{scripted_collect, ControllerConfig};
use taco_rl::evalharness::{generate_specs, run_specs, summarize, EvalRow, Protocol};
use taco_rl::hrl::{CqlHyperParams, GoalSamplerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = scripted_collect(&mut rng, 6, 400, ControllerConfig::default());
    let ds = Dataset::new(eps.into_iter().map(|e| e.record).collect(), Some(0))?;

    let cfg = FlatCqlConfig { steps: 300, ..FlatCqlConfig::default() };
    let (bundle, log) = train_flat_cql(
        &ds,
        &CqlHyperParams::default(),
        &GoalSamplerConfig { k: 2, ..GoalSamplerConfig::default() },
        &cfg,
    )?;
    for row in log.iter().step_by(100) {
        println!("step {:>3}  critic {:8.3}  actor {:8.3}", row.step, row.critic_loss, row.actor_loss);
    }

    let specs = generate_specs(Protocol::Chain5, 20, 0);
    let mut policy = FlatCqlPolicy { actor: bundle.actor.clone() };
    let out = run_specs(&mut policy, &specs, &mut ChaCha8Rng::seed_from_u64(1))?;
    let s = summarize("cql-her", "chain5", &EvalRow::from_outcomes("cql-her", 0, &out));
    println!("avg completed length {:.2}", s.avg_len_mean);
    Ok(())
}
