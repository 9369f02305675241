//! Drive the desk simulator with the scripted controller and watch task
//! predicates flip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taco_rl::env::{drive_affordance, Affordance, Controller, ControllerConfig, EnvState, TaskPredicate};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = EnvState::reset(&mut rng);
    let ctrl = Controller::new(ControllerConfig::oracle());
    let init = state.observe();
    println!("start: {:?}", state);

    for aff in [Affordance::OpenDrawer { target: 0.95 }, Affordance::PressButton, Affordance::PickBlock] {
        let used = drive_affordance(&mut state, &aff, &ctrl, &mut rng, 200, |_, _| {});
        let holding: Vec<String> =
            TaskPredicate::SIMPLE.iter().filter(|t| t.evaluate(&init, &state.observe())).map(|t| t.name()).collect();
        println!("{aff:?} took {used} steps; tasks holding: {}", holding.join(" "));
    }
}
