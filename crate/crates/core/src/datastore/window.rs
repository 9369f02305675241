use rand::Rng;

use super::Dataset;
use crate::env::Observation;

/// Padded window length; also the high-level plan horizon `k`.
pub const WINDOW_LEN: usize = 16;
pub const WINDOW_MIN: usize = 8;

/// A play segment of 8 to 16 real steps padded to [`WINDOW_LEN`].
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
    pub raw_len: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `WINDOW_LEN x obs_dim`, row-major.
    pub observations: Vec<f64>,
    /// `WINDOW_LEN x act_dim`, row-major.
    pub actions: Vec<f64>,
    pub mask: [bool; WINDOW_LEN],
}

impl Window {
    /// Copy `raw_len` steps starting at `start` and pad: observations repeat
    /// the last real one, pad actions are zero deltas with the last gripper
    /// command.
    pub fn extract(ds: &Dataset, episode: usize, start: usize, raw_len: usize) -> Self {
        let ep = ds.episode(episode);
        assert!((1..=WINDOW_LEN).contains(&raw_len) && start + raw_len <= ep.len(), "window out of range");
        let (od, ad) = (ep.obs_dim, ep.act_dim);
        let mut observations = Vec::with_capacity(WINDOW_LEN * od);
        let mut actions = Vec::with_capacity(WINDOW_LEN * ad);
        for t in start..start + raw_len {
            observations.extend_from_slice(ep.obs_row(t));
            actions.extend_from_slice(ep.action(t));
        }
        let last_obs = ep.obs_row(start + raw_len - 1);
        let mut pad_action = vec![0.0; ad];
        pad_action[ad - 1] = ep.action(start + raw_len - 1)[ad - 1];
        for _ in raw_len..WINDOW_LEN {
            observations.extend_from_slice(last_obs);
            actions.extend_from_slice(&pad_action);
        }
        let mut mask = [false; WINDOW_LEN];
        mask[..raw_len].fill(true);
        Self { episode, start, raw_len, obs_dim: od, act_dim: ad, observations, actions, mask }
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn first(&self) -> Observation {
        Observation::from_slice(self.obs_row(0))
    }

    pub fn last(&self) -> Observation {
        Observation::from_slice(self.obs_row(self.raw_len - 1))
    }
}

/// Sample a window: raw length uniform on `{8..16}`, episode proportional
/// to its length, start uniform over the starts that fit.
pub fn sample_window<R: Rng>(rng: &mut R, ds: &Dataset) -> Window {
    let raw_len = rng.random_range(WINDOW_MIN..=WINDOW_LEN);
    let (episode, _) = ds.locate(rng.random_range(0..ds.total_steps()));
    let start = rng.random_range(0..=ds.episode(episode).len() - raw_len);
    Window::extract(ds, episode, start, raw_len)
}
