//! Train a small latent motor plan model on scripted play and sample plans
//! from the prior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taco_rl::datastore::Dataset;
use taco_rl::env::{scripted_collect, ControllerConfig};
use taco_rl::lmp::{train_lmp, LmpHyperParams, LmpTrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = scripted_collect(&mut rng, 8, 400, ControllerConfig::default());
    let ds = Dataset::new(eps.into_iter().map(|e| e.record).collect(), Some(0))?;

    let hp = LmpHyperParams {
        lr: 1e-3,
        batch: 16,
        model_width: 32,
        ff_width: 64,
        blocks: 1,
        decoder_hidden: 64,
        ..LmpHyperParams::default()
    };
    let cfg = LmpTrainConfig { epochs: 3, steps_per_epoch: 40, seed: 0, out_dir: None, resume: false };
    let (_bundle, log) = train_lmp(&ds, &hp, &cfg)?;
    for row in log.iter().step_by(20) {
        println!("step {:>3}  nll {:8.3}  kl {:6.3}", row.step, row.nll, row.kl);
    }
    Ok(())
}
