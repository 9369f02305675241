//! Hindsight goal relabeling with geometric offsets and negative mining.

use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::datastore::{mine_negative, Dataset, NegativeSource, ProprioIndex};
use crate::env::Observation;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalSamplerConfig {
    /// Success probability of the geometric offset distribution.
    pub p: f64,
    /// Transition length; consecutive goals are `k - 1` steps apart.
    pub k: usize,
    pub positive_fraction: f64,
}

impl Default for GoalSamplerConfig {
    fn default() -> Self {
        Self { p: 0.3, k: 16, positive_fraction: 0.9 }
    }
}

impl GoalSamplerConfig {
    pub fn negative_fraction(&self) -> f64 {
        1.0 - self.positive_fraction
    }

    pub fn stride(&self) -> usize {
        self.k - 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(format!("geometric p must lie in (0, 1), got {}", self.p));
        }
        if self.k < 2 {
            return Err(format!("k must be at least 2, got {}", self.k));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(format!("positive fraction must lie in [0, 1], got {}", self.positive_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalBranch {
    Positive { delta: usize },
    Negative(NegativeSource),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalSample {
    pub goal: Observation,
    pub reward: f64,
    pub branch: GoalBranch,
}

/// Goal index and reward for offset `delta` from step `t` of an episode of
/// length `len`. The index is clipped to the final step; only `delta == 1`
/// earns a reward.
pub fn relabel(len: usize, t: usize, stride: usize, delta: usize) -> (usize, f64) {
    let idx = (t + delta * stride).min(len - 1);
    (idx, if delta == 1 { 1.0 } else { 0.0 })
}

/// Offset on the support `{1, 2, ...}` with `P(Δ = d) = (1 - p)^(d - 1) p`.
pub fn sample_offset<R: Rng>(rng: &mut R, p: f64) -> usize {
    Geometric::new(p).expect("p validated").sample(rng) as usize + 1
}

/// Goal for the transition that starts at step `t` of `episode` and ends at
/// `t + k - 1`.
pub fn sample_goal<R: Rng>(
    rng: &mut R,
    cfg: &GoalSamplerConfig,
    ds: &Dataset,
    index: &ProprioIndex,
    episode: usize,
    t: usize,
) -> GoalSample {
    let ep = ds.episode(episode);
    let stride = cfg.stride();
    debug_assert!(t + stride < ep.len(), "transition must fit in its episode");
    if rng.random::<f64>() < cfg.positive_fraction {
        let delta = sample_offset(rng, cfg.p);
        let (idx, reward) = relabel(ep.len(), t, stride, delta);
        GoalSample { goal: ep.observation(idx), reward, branch: GoalBranch::Positive { delta } }
    } else {
        let anchor = ep.observation(t + stride);
        let (goal, src) = mine_negative(index, &anchor, rng);
        GoalSample { goal, reward: 0.0, branch: GoalBranch::Negative(src) }
    }
}
