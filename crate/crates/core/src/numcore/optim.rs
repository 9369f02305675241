use std::collections::HashMap;

use super::{Gradients, NumError, ParamStore, Tensor};

/// Adam optimiser state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, v: m.clone(), m }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moments and step count as checkpoint blocks named after the parameters.
    pub fn to_blocks(&self, store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}step"), Tensor::scalar(self.step as f64))];
        for ((name, t), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}m.{name}"), Tensor::new(t.shape().to_vec(), m.clone()).expect("moment shape")));
            out.push((format!("{prefix}v.{name}"), Tensor::new(t.shape().to_vec(), v.clone()).expect("moment shape")));
        }
        out
    }

    pub fn load_blocks(
        &mut self,
        store: &ParamStore,
        blocks: &HashMap<String, Tensor>,
        prefix: &str,
    ) -> Result<(), NumError> {
        let get = |key: String, len: usize| -> Result<&Tensor, NumError> {
            let t = blocks.get(&key).ok_or_else(|| NumError::Checkpoint(format!("missing optimizer block {key}")))?;
            if t.len() != len {
                return Err(NumError::Checkpoint(format!("optimizer block {key} has {} values", t.len())));
            }
            Ok(t)
        };
        self.step = get(format!("{prefix}step"), 1)?.item() as u64;
        for (i, (name, t)) in store.iter().enumerate() {
            self.m[i].copy_from_slice(get(format!("{prefix}m.{name}"), t.len())?.data());
            self.v[i].copy_from_slice(get(format!("{prefix}v.{name}"), t.len())?.data());
        }
        Ok(())
    }

    /// Apply one bias-corrected Adam update to every parameter of `store` that
    /// has a gradient. Rejects non-finite gradients before touching anything.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NumError> {
        if self.m.len() != store.len() {
            return Err(NumError::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(store, id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumError::NonFinite(format!("gradient of {}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(store, id) else { continue };
            let g = g.to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Graph, Tensor};

    fn quadratic_grads(store: &ParamStore) -> (f64, Gradients) {
        let id = store.find("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(store, id);
        let t = g.add_scalar(w, -3.0);
        let sq = g.square(t);
        let loss = g.sum(sq);
        (g.scalar(loss), g.backward(loss).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![0.5, -0.5]));
        let mut adam = AdamState::new(&store, 0.1);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let z = g.scale(w, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[0.5, -0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude() {
        // g = 1: m̂ = 1, v̂ = 1, Δ = -lr / (1 + eps)
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(&store, 0.1);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        adam.step(&mut store, &grads).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
        assert!(store.get(id).item() < -0.0999999);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![0.0, 10.0, -4.0]));
        let mut adam = AdamState::new(&store, 0.02);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let (l, grads) = quadratic_grads(&store);
            losses.push(l);
            adam.step(&mut store, &grads).unwrap();
        }
        // after a short warm-up the loss is strictly decreasing
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn nan_gradient_halts() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![-1.0]));
        let mut adam = AdamState::new(&store, 0.1);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let s = g.scale(w, f64::NAN);
        let loss = g.sum(s);
        let bad = g.backward(loss).unwrap();
        let err = adam.step(&mut store, &bad).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
        assert_eq!(store.get(id).item(), -1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
