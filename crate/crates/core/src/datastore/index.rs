use std::collections::HashMap;

use rand::Rng;

use super::Dataset;
use crate::env::{Observation, PROPRIO_DIM};

pub const GRID_CELL: f64 = 0.05;
/// Proprioceptive radius within which a state counts as similar.
pub const NEG_PROPRIO_RADIUS: f64 = 0.05;
/// Minimum scene distance for a mined negative.
pub const NEG_SCENE_MIN: f64 = 0.1;

type Cell = [i64; PROPRIO_DIM];

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Uniform grid over proprio keys `(x, y, g)`; every dataset timestep is
/// stored under its global id.
#[derive(Clone, Debug)]
pub struct ProprioIndex {
    observations: Vec<Observation>,
    grid: HashMap<Cell, Vec<u32>>,
}

fn cell_of(key: &[f64]) -> Cell {
    let mut c = [0; PROPRIO_DIM];
    for (ci, k) in c.iter_mut().zip(key) {
        *ci = (k / GRID_CELL).floor() as i64;
    }
    c
}

impl ProprioIndex {
    pub fn build(ds: &Dataset) -> Self {
        Self::from_observations((0..ds.total_steps()).map(|g| ds.observation(g)).collect())
    }

    pub fn from_observations(observations: Vec<Observation>) -> Self {
        let mut grid: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, o) in observations.iter().enumerate() {
            grid.entry(cell_of(o.proprio())).or_default().push(i as u32);
        }
        Self { observations, grid }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observation(&self, id: usize) -> &Observation {
        &self.observations[id]
    }

    /// Ids of all timesteps with `‖proprio − q‖₂ ≤ r`, ascending.
    pub fn query(&self, q: &[f64], r: f64) -> Vec<usize> {
        let lo = cell_of(&q.iter().map(|v| v - r).collect::<Vec<_>>());
        let hi = cell_of(&q.iter().map(|v| v + r).collect::<Vec<_>>());
        let mut out = Vec::new();
        for cx in lo[0]..=hi[0] {
            for cy in lo[1]..=hi[1] {
                for cg in lo[2]..=hi[2] {
                    if let Some(ids) = self.grid.get(&[cx, cy, cg]) {
                        out.extend(
                            ids.iter().map(|&i| i as usize).filter(|&i| l2(self.observations[i].proprio(), q) <= r),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn query_brute(&self, q: &[f64], r: f64) -> Vec<usize> {
        (0..self.observations.len()).filter(|&i| l2(self.observations[i].proprio(), q) <= r).collect()
    }

    /// States similar to `anchor` in proprio but different in scene.
    pub fn negative_candidates(&self, anchor: &Observation) -> Vec<usize> {
        let mut c = self.query(anchor.proprio(), NEG_PROPRIO_RADIUS);
        c.retain(|&i| l2(self.observations[i].scene(), anchor.scene()) >= NEG_SCENE_MIN);
        c
    }

    pub fn negative_candidates_brute(&self, anchor: &Observation) -> Vec<usize> {
        (0..self.observations.len())
            .filter(|&i| {
                let o = &self.observations[i];
                l2(o.proprio(), anchor.proprio()) <= NEG_PROPRIO_RADIUS
                    && l2(o.scene(), anchor.scene()) >= NEG_SCENE_MIN
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    Mined,
    Fallback,
}

/// Draw a negative goal for `anchor`: uniform over the mined candidates, or
/// a uniform dataset state when there are none.
pub fn mine_negative<R: Rng>(index: &ProprioIndex, anchor: &Observation, rng: &mut R) -> (Observation, NegativeSource) {
    let c = index.negative_candidates(anchor);
    if c.is_empty() {
        let i = rng.random_range(0..index.len());
        (index.observations[i], NegativeSource::Fallback)
    } else {
        (index.observations[c[rng.random_range(0..c.len())]], NegativeSource::Mined)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(p: [f64; 3], drawer: f64) -> Observation {
        Observation([p[0], p[1], p[2], 0.3, 0.3, 0.0, drawer, 0.5, 0.0])
    }

    #[test]
    fn three_state_query() {
        let idx = ProprioIndex::from_observations(vec![
            obs([0.0, 0.0, -1.0], 0.5),
            obs([0.5, 0.5, -1.0], 0.5),
            obs([1.0, 1.0, 1.0], 0.5),
        ]);
        assert_eq!(idx.query(&[0.01, 0.0, -1.0], 0.05), vec![0]);
        assert!(idx.query(&[0.5, 0.5, -1.0], 0.0).contains(&1));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<_> = (0..1000)
            .map(|_| {
                let g = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                obs([rng.random(), rng.random(), g], rng.random())
            })
            .collect();
        let idx = ProprioIndex::from_observations(states);
        for _ in 0..100 {
            let q = [rng.random(), rng.random(), if rng.random_bool(0.5) { 1.0 } else { -1.0 }];
            let r = rng.random_range(0.0..0.2);
            assert_eq!(idx.query(&q, r), idx.query_brute(&q, r));
        }
    }

    #[test]
    fn mines_other_scene() {
        let idx = ProprioIndex::from_observations(vec![obs([0.4, 0.4, -1.0], 0.1), obs([0.4, 0.4, -1.0], 0.9)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, src) = mine_negative(&idx, idx.observation(0), &mut rng);
        assert_eq!(src, NegativeSource::Mined);
        assert_eq!(n, *idx.observation(1));
    }

    #[test]
    fn unique_proprio_falls_back() {
        let idx = ProprioIndex::from_observations(vec![obs([0.1, 0.1, -1.0], 0.1), obs([0.9, 0.9, 1.0], 0.9)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, src) = mine_negative(&idx, idx.observation(0), &mut rng);
        assert_eq!(src, NegativeSource::Fallback);
    }
}
