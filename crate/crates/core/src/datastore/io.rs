use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, EpisodeRecord};

pub const EPISODE_MAGIC: &[u8; 4] = b"TEPS";
pub const EPISODE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub episode_count: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub lengths: Vec<usize>,
    pub collector_seed: Option<u64>,
    pub files: Vec<String>,
}

impl DatasetManifest {
    pub fn total_steps(&self) -> usize {
        self.lengths.iter().sum()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn episode_file(i: usize) -> String {
    format!("episodes/ep_{i:06}.bin")
}

fn encode_episode(ep: &EpisodeRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (ep.observations().len() + ep.actions().len()));
    out.extend_from_slice(EPISODE_MAGIC);
    for v in [EPISODE_VERSION, ep.len() as u32, ep.obs_dim as u32, ep.act_dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in ep.observations().iter().chain(ep.actions()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_episode(id: u32, bytes: &[u8], file: &str) -> Result<EpisodeRecord, DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { file: file.into() });
    }
    if &bytes[..4] != EPISODE_MAGIC {
        return Err(DataError::BadMagic { file: file.into() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != EPISODE_VERSION {
        return Err(DataError::Version { file: file.into(), version });
    }
    let (t, od, ad) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = t * (od + ad);
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(DataError::Truncated { file: file.into() });
    }
    let values: Vec<f64> =
        bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let (obs, acts) = values.split_at(t * od);
    EpisodeRecord::new(id, od, ad, obs.to_vec(), acts.to_vec())
}

/// Write one binary file per episode plus `manifest.json` into `dir`.
pub fn write_dataset(
    episodes: &[EpisodeRecord],
    dir: &Path,
    collector_seed: Option<u64>,
    overwrite: bool,
) -> Result<DatasetManifest, DataError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(DataError::TargetExists(dir.display().to_string()));
            }
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let ep_dir = dir.join("episodes");
    fs::create_dir_all(&ep_dir).map_err(io_err(&ep_dir))?;
    let first = episodes.first().ok_or_else(|| DataError::Invalid("no episodes".into()))?;
    let mut files = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let name = episode_file(i);
        let path = dir.join(&name);
        fs::write(&path, encode_episode(ep)).map_err(io_err(&path))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        format_version: EPISODE_VERSION,
        episode_count: episodes.len(),
        obs_dim: first.obs_dim,
        act_dim: first.act_dim,
        lengths: episodes.iter().map(EpisodeRecord::len).collect(),
        collector_seed,
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(dir)?;
    if manifest.files.len() != manifest.episode_count || manifest.lengths.len() != manifest.episode_count {
        return Err(DataError::Manifest("episode count disagrees with file list".into()));
    }
    let mut episodes = Vec::with_capacity(manifest.episode_count);
    for (i, name) in manifest.files.iter().enumerate() {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let ep = decode_episode(i as u32, &bytes, &path.display().to_string())?;
        if ep.len() != manifest.lengths[i] || ep.obs_dim != manifest.obs_dim || ep.act_dim != manifest.act_dim {
            return Err(DataError::Manifest(format!("{name} disagrees with manifest")));
        }
        episodes.push(ep);
    }
    Dataset::new(episodes, manifest.collector_seed)
}
