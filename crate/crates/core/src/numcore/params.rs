use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{NumError, Tensor};

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters of one network.
///
/// Every store carries a process-unique tag so that gradients computed on a
/// shared graph can be routed back to the store that owns each parameter.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { tag: fresh_tag(), names: self.names.clone(), tensors: self.tensors.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: fresh_tag(), names: Vec::new(), tensors: Vec::new() }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for a `(fan_in, fan_out)` weight.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Freeze or unfreeze every parameter.
    pub fn set_trainable(&mut self, flag: bool) {
        for t in &mut self.tensors {
            t.requires_grad = flag;
        }
    }

    /// Overwrite values from a store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NumError> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// `self <- (1 - rate) * self + rate * online`, parameter by parameter.
    pub fn soft_update_from(&mut self, online: &ParamStore, rate: f64) -> Result<(), NumError> {
        self.check_layout(online)?;
        for (dst, src) in self.tensors.iter_mut().zip(&online.tensors) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - rate) * *d + rate * s;
            }
        }
        Ok(())
    }

    fn check_layout(&self, other: &ParamStore) -> Result<(), NumError> {
        if self.names != other.names {
            return Err(NumError::Shape("parameter stores have different layouts".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(NumError::Shape(format!(
                    "parameter {} has shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Values keyed by name, used by checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Load values by name from a checkpoint block list. Every parameter must be present.
    pub fn load_named(&mut self, blocks: &HashMap<String, Tensor>, prefix: &str) -> Result<(), NumError> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let src = blocks.get(&key).ok_or_else(|| NumError::Checkpoint(format!("missing parameter block {key}")))?;
            if src.len() != t.len() {
                return Err(NumError::Checkpoint(format!(
                    "parameter {key}: expected {} values, found {}",
                    t.len(),
                    src.len()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Parameter gradients produced by [`Graph::backward`](super::Graph::backward).
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<(u64, usize), Vec<f64>>,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, key: (u64, usize), grad: &[f64]) {
        match self.map.get_mut(&key) {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(key, grad.to_vec());
            }
        }
    }

    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&[f64]> {
        self.map.get(&(store.tag(), id.0)).map(Vec::as_slice)
    }

    /// True when no gradient reached any parameter of `store`.
    pub fn untouched(&self, store: &ParamStore) -> bool {
        !self.map.keys().any(|(tag, _)| *tag == store.tag())
    }

    /// Euclidean norm over the gradients that belong to `store`.
    pub fn norm(&self, store: &ParamStore) -> f64 {
        self.map
            .iter()
            .filter(|((tag, _), _)| *tag == store.tag())
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, store: &ParamStore, factor: f64) {
        for ((tag, _), g) in self.map.iter_mut() {
            if *tag == store.tag() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Rescale the gradients of `store` so that their joint norm is at most `max_norm`.
    pub fn clip_norm(&mut self, store: &ParamStore, max_norm: f64) -> f64 {
        let n = self.norm(store);
        if n > max_norm && n > 0.0 {
            self.scale(store, max_norm / n);
        }
        n
    }
}
