//! Play-data persistence and sampling: episode files, padded windows and the
//! proprioceptive neighbour index used for negative mining.

mod index;
mod io;
mod window;

use thiserror::Error;

use crate::env::{EnvAction, Observation, ACT_DIM, OBS_DIM};

pub use index::{mine_negative, NegativeSource, ProprioIndex, GRID_CELL, NEG_PROPRIO_RADIUS, NEG_SCENE_MIN};
pub use io::{load_dataset, read_manifest, write_dataset, DatasetManifest, EPISODE_MAGIC, EPISODE_VERSION};
pub use window::{sample_window, Window, WINDOW_LEN, WINDOW_MIN};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{file}: bad magic bytes")]
    BadMagic { file: String },
    #[error("{file}: unsupported version {version}")]
    Version { file: String, version: u32 },
    #[error("{file}: truncated or malformed payload")]
    Truncated { file: String },
    #[error("target {0} exists and is not empty (pass overwrite to replace it)")]
    TargetExists(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// One play episode. Values are held in `f64` but rounded through `f32`, the
/// on-disk precision, so a record in memory equals its reloaded copy.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub id: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    observations: Vec<f64>,
    actions: Vec<f64>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl EpisodeRecord {
    pub fn new(
        id: u32,
        obs_dim: usize,
        act_dim: usize,
        observations: Vec<f64>,
        actions: Vec<f64>,
    ) -> Result<Self, DataError> {
        if obs_dim == 0
            || act_dim == 0
            || !observations.len().is_multiple_of(obs_dim)
            || !actions.len().is_multiple_of(act_dim)
        {
            return Err(DataError::Invalid(format!("episode {id}: payload not a multiple of its dims")));
        }
        let t = observations.len() / obs_dim;
        if actions.len() / act_dim != t {
            return Err(DataError::Invalid(format!(
                "episode {id}: {t} observations vs {} actions",
                actions.len() / act_dim
            )));
        }
        Ok(Self {
            id,
            obs_dim,
            act_dim,
            observations: observations.into_iter().map(round_f32).collect(),
            actions: actions.into_iter().map(round_f32).collect(),
        })
    }

    pub fn from_steps(id: u32, obs: &[Observation], acts: &[EnvAction]) -> Self {
        let o = obs.iter().flat_map(|o| o.0).collect();
        let a = acts.iter().flat_map(|a| a.to_array()).collect();
        Self::new(id, OBS_DIM, ACT_DIM, o, a).expect("collector emits matched steps")
    }

    pub fn len(&self) -> usize {
        self.observations.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn obs_row(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn observation(&self, t: usize) -> Observation {
        Observation::from_slice(self.obs_row(t))
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }
}

/// Read-only collection of episodes with global timestep ids.
#[derive(Clone, Debug)]
pub struct Dataset {
    episodes: Vec<EpisodeRecord>,
    offsets: Vec<usize>,
    pub collector_seed: Option<u64>,
}

impl Dataset {
    pub fn new(episodes: Vec<EpisodeRecord>, collector_seed: Option<u64>) -> Result<Self, DataError> {
        if episodes.is_empty() {
            return Err(DataError::Invalid("no episodes".into()));
        }
        let mut offsets = Vec::with_capacity(episodes.len() + 1);
        let mut total = 0;
        for ep in &episodes {
            if ep.len() < WINDOW_LEN {
                return Err(DataError::Invalid(format!(
                    "episode {} has {} steps, need at least {WINDOW_LEN}",
                    ep.id,
                    ep.len()
                )));
            }
            if ep.obs_dim != OBS_DIM {
                return Err(DataError::Invalid(format!("episode {} has obs dim {}", ep.id, ep.obs_dim)));
            }
            offsets.push(total);
            total += ep.len();
        }
        offsets.push(total);
        Ok(Self { episodes, offsets, collector_seed })
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn episode(&self, i: usize) -> &EpisodeRecord {
        &self.episodes[i]
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn global_id(&self, episode: usize, t: usize) -> usize {
        self.offsets[episode] + t
    }

    /// Inverse of [`Dataset::global_id`].
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let ep = self.offsets.partition_point(|&o| o <= global) - 1;
        (ep, global - self.offsets[ep])
    }

    pub fn observation(&self, global: usize) -> Observation {
        let (ep, t) = self.locate(global);
        self.episodes[ep].observation(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ramp_episode(id: u32, t: usize) -> EpisodeRecord {
        let obs = (0..t * OBS_DIM).map(|i| (i / OBS_DIM) as f64 * 0.001).collect();
        let acts = (0..t * ACT_DIM).map(|i| if i % 3 == 2 { 1.0 } else { 0.01 }).collect();
        EpisodeRecord::new(id, OBS_DIM, ACT_DIM, obs, acts).unwrap()
    }

    #[test]
    fn global_ids_round_trip() {
        let ds = Dataset::new(vec![ramp_episode(0, 20), ramp_episode(1, 17), ramp_episode(2, 30)], None).unwrap();
        assert_eq!(ds.total_steps(), 67);
        for g in 0..67 {
            let (e, t) = ds.locate(g);
            assert_eq!(ds.global_id(e, t), g);
        }
        assert_eq!(ds.locate(20), (1, 0));
    }

    #[test]
    fn short_episode_rejected() {
        assert!(Dataset::new(vec![ramp_episode(0, 15)], None).is_err());
    }

    #[test]
    fn mismatched_counts_rejected() {
        let err = EpisodeRecord::new(0, OBS_DIM, ACT_DIM, vec![0.0; 18], vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("2 observations vs 1 actions"));
    }
}
