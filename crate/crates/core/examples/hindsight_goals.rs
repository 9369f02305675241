//! Relabel play transitions with hindsight goals and mined negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taco_rl::datastore::{Dataset, ProprioIndex};
use taco_rl::env::{scripted_collect, ControllerConfig};
use taco_rl::hrl::{sample_goal, GoalBranch, GoalSamplerConfig};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = scripted_collect(&mut rng, 6, 400, ControllerConfig::default());
    let ds = Dataset::new(eps.into_iter().map(|e| e.record).collect(), Some(3)).unwrap();
    let index = ProprioIndex::build(&ds);
    let cfg = GoalSamplerConfig::default();

    let (mut pos, mut rewarded, mut mined, mut fallback) = (0, 0, 0, 0);
    for _ in 0..10_000 {
        let ep = rng.random_range(0..ds.len());
        let t = rng.random_range(0..ds.episode(ep).len() - cfg.stride());
        let s = sample_goal(&mut rng, &cfg, &ds, &index, ep, t);
        match s.branch {
            GoalBranch::Positive { delta } => {
                pos += 1;
                if delta == 1 {
                    rewarded += 1;
                }
            }
            GoalBranch::Negative(taco_rl::datastore::NegativeSource::Mined) => mined += 1,
            GoalBranch::Negative(_) => fallback += 1,
        }
    }
    println!("positives {pos} (rewarded {rewarded}), mined negatives {mined}, fallback negatives {fallback}");
}
