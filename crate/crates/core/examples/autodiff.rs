//! Build a small graph, backpropagate, and compare against central
//! differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taco_rl::numcore::gradcheck::check_gradients;
use taco_rl::numcore::{Graph, ParamStore, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let w = store.add_uniform("w", 3, 2, 3, &mut rng);
    let b = store.add("b", Tensor::row(vec![0.1, -0.2]));
    let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());

    let loss = |g: &mut Graph, s: &ParamStore| {
        let xv = g.constant(x.clone());
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let h = g.linear(xv, wv, bv)?;
        let h = g.tanh(h);
        let lse = g.logsumexp_cols(h);
        Ok(g.mean(lse))
    };

    let mut g = Graph::new();
    let l = loss(&mut g, &store)?;
    let grads = g.backward(l)?;
    println!("loss {:.6}", g.scalar(l));
    println!("dL/db = {:?}", grads.get(&store, b).unwrap());

    let report = check_gradients(&mut store, loss, 1e-5, 6, &mut rng)?;
    println!("checked {} coordinates, max relative error {:.2e}", report.checked, report.max_rel_error);
    Ok(())
}
