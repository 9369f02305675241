//! Full hierarchy at toy scale: latent plans, conservative high-level
//! training, then chain evaluation against plain plan-prior inference.
//!
//! The budget here only exercises the wiring, so both policies score near
//! zero. `taco` at its default settings is what separates them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taco_rl::baselines::lmp_inference_policy;
use taco_rl::datastore::Dataset;
use taco_rl::env::{scripted_collect, ControllerConfig};
use taco_rl::evalharness::{generate_specs, run_specs, summarize, taco_policy, EvalRow, Policy, Protocol};
use taco_rl::hrl::{train_hrl, CqlHyperParams, GoalSamplerConfig, HrlTrainConfig};
use taco_rl::lmp::{train_lmp, LmpHyperParams, LmpTrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = scripted_collect(&mut rng, 10, 500, ControllerConfig::default());
    let ds = Dataset::new(eps.into_iter().map(|e| e.record).collect(), Some(0))?;

    let hp = LmpHyperParams { lr: 1e-3, batch: 16, blocks: 1, ..LmpHyperParams::default() };
    let lcfg = LmpTrainConfig { epochs: 2, steps_per_epoch: 50, seed: 0, out_dir: None, resume: false };
    let (lmp, _) = train_lmp(&ds, &hp, &lcfg)?;

    let cql = CqlHyperParams { initial_entropy_coef: 0.3, batch: 32, ..CqlHyperParams::default() };
    let hcfg = HrlTrainConfig { steps: 300, pool_size: 2000, ..HrlTrainConfig::default() };
    let (hrl, log) = train_hrl(&ds, &lmp, &cql, &GoalSamplerConfig::default(), &hcfg)?;
    let last = log.last().unwrap();
    println!("high-level training: {} steps, final critic loss {:.3}", log.len(), last.critic_loss);

    let specs = generate_specs(Protocol::Chain5, 20, 0);
    let mut taco = taco_policy(&hrl, &lmp);
    let mut plain = lmp_inference_policy(&lmp);
    for policy in [&mut taco, &mut plain] {
        let out = run_specs(policy, &specs, &mut ChaCha8Rng::seed_from_u64(1))?;
        let name = policy.method().to_string();
        let s = summarize(&name, "chain5", &EvalRow::from_outcomes(&name, 0, &out));
        println!("{name:>6}: success by position {:?}, avg len {:.2}", s.sr, s.avg_len_mean);
    }
    Ok(())
}
