//! Generate evaluation specs for every protocol and score a random-action
//! policy against them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taco_rl::evalharness::{generate_specs, run_specs, summarize, EvalRow, Protocol, RandomActionPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for protocol in [Protocol::Chain5, Protocol::SingleGoalTwoTask, Protocol::Hard] {
        let specs = generate_specs(protocol, 30, 7);
        let tasks: Vec<String> = specs[0].subgoals.iter().map(|g| g.task.name()).collect();
        println!("{protocol}: first spec asks for [{}]", tasks.join(", "));
        let out = run_specs(&mut RandomActionPolicy, &specs, &mut ChaCha8Rng::seed_from_u64(7))?;
        let s = summarize("random", protocol.name(), &EvalRow::from_outcomes("random", 7, &out));
        println!("  random policy: sr {:?}", s.sr);
    }
    Ok(())
}
