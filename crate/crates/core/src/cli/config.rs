//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key must be known and
//! may appear once. Keys left out keep their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::baselines::FlatCqlConfig;
use crate::env::ControllerConfig;
use crate::hrl::{CqlHyperParams, GoalSamplerConfig, HrlTrainConfig};
use crate::lmp::{LmpHyperParams, LmpTrainConfig};
use crate::numcore::nn::CellKind;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub collect_episodes: usize,
    pub collect_steps: usize,
    pub collect_noise: f64,
    pub lmp: LmpHyperParams,
    pub lmp_epochs: usize,
    pub lmp_steps_per_epoch: usize,
    pub cql: CqlHyperParams,
    pub goals: GoalSamplerConfig,
    pub hrl_steps: usize,
    pub hrl_pool: usize,
    pub checkpoint_every: usize,
    pub guard_window: usize,
    pub flat_steps: usize,
    pub flat_target_entropy: f64,
    pub flat_temperature_start: f64,
    pub flat_temperature_end: f64,
    pub eval_chains: usize,
    pub eval_two_task: usize,
    pub eval_hard: usize,
    /// Evaluation seeds; empty means `[seed]`.
    pub eval_seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        let hrl = HrlTrainConfig::default();
        let flat = FlatCqlConfig::default();
        Self {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            collect_episodes: 200,
            collect_steps: 1000,
            collect_noise: ControllerConfig::default().noise_std,
            lmp: LmpHyperParams { lr: 1e-3, cell: CellKind::Tanh, ..Default::default() },
            lmp_epochs: 8,
            lmp_steps_per_epoch: 500,
            cql: CqlHyperParams { initial_entropy_coef: 0.3, ..Default::default() },
            goals: GoalSamplerConfig::default(),
            hrl_steps: 18_000,
            hrl_pool: hrl.pool_size,
            checkpoint_every: hrl.checkpoint_every,
            guard_window: hrl.guard_window,
            flat_steps: flat.steps,
            flat_target_entropy: flat.target_entropy,
            flat_temperature_start: flat.temperature_start,
            flat_temperature_end: flat.temperature_end,
            eval_chains: 100,
            eval_two_task: 200,
            eval_hard: 200,
            eval_seeds: Vec::new(),
        }
    }
}

/// One resolved setting. `scaled` carries the reference value the desk
/// default departs from.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: &'static str,
    pub value: String,
    pub scaled: Option<&'static str>,
}

fn entry(key: &'static str, value: impl ToString) -> Entry {
    Entry { key, value: value.to_string(), scaled: None }
}

fn scaled(key: &'static str, value: impl ToString, reference: &'static str) -> Entry {
    Entry { key, value: value.to_string(), scaled: Some(reference) }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("config key '{key}': cannot parse '{v}'"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("config key '{key}': expected true or false, got '{v}'")),
    }
}

fn cell_name(c: CellKind) -> &'static str {
    match c {
        CellKind::Gru => "gru",
        CellKind::Tanh => "tanh",
    }
}

impl Config {
    /// Every setting in a fixed order; the basis of the config hash.
    pub fn entries(&self) -> Vec<Entry> {
        let (l, c) = (&self.lmp, &self.cql);
        let seeds: Vec<String> = self.eval_seeds.iter().map(u64::to_string).collect();
        vec![
            entry("seed", self.seed),
            entry("data_dir", self.data_dir.display()),
            entry("out_dir", self.out_dir.display()),
            entry("collect.episodes", self.collect_episodes),
            entry("collect.steps_per_episode", self.collect_steps),
            entry("collect.noise_std", self.collect_noise),
            entry("lmp.beta", l.beta),
            entry("lmp.kl_alpha", l.kl_alpha),
            entry("lmp.batch", l.batch),
            scaled("lmp.lr", l.lr, "1e-4"),
            entry("lmp.latent_dim", l.latent_dim),
            entry("lmp.embed_dim", l.embed_dim),
            entry("lmp.model_width", l.model_width),
            entry("lmp.heads", l.heads),
            entry("lmp.ff_width", l.ff_width),
            entry("lmp.blocks", l.blocks),
            entry("lmp.prior_width", l.prior_width),
            entry("lmp.prior_layers", l.prior_layers),
            entry("lmp.decoder_hidden", l.decoder_hidden),
            entry("lmp.decoder_layers", l.decoder_layers),
            scaled("lmp.cell", cell_name(l.cell), "gru"),
            entry("lmp.components", l.components),
            entry("lmp.bins", l.bins),
            scaled("lmp.epochs", self.lmp_epochs, "trained to convergence"),
            scaled("lmp.steps_per_epoch", self.lmp_steps_per_epoch, "trained to convergence"),
            entry("hrl.critic_lr", c.critic_lr),
            entry("hrl.actor_lr", c.actor_lr),
            entry("hrl.entropy_lr", c.entropy_lr),
            entry("hrl.gamma", c.gamma),
            entry("hrl.tau", c.tau),
            entry("hrl.cql_alpha", c.cql_alpha),
            entry("hrl.n_samples", c.n_samples),
            entry("hrl.bc_epochs", c.bc_epochs),
            entry("hrl.target_entropy", c.target_entropy),
            scaled("hrl.initial_entropy_coef", c.initial_entropy_coef, "1.0"),
            entry("hrl.clip_targets", c.clip_targets),
            entry("hrl.batch", c.batch),
            entry("hrl.critic_embed_dim", c.critic.embed_dim),
            entry("hrl.critic_width", c.critic.width),
            entry("hrl.critic_layers", c.critic.layers),
            scaled("hrl.steps", self.hrl_steps, "trained to convergence"),
            entry("hrl.pool_size", self.hrl_pool),
            entry("goals.p", self.goals.p),
            entry("goals.k", self.goals.k),
            entry("goals.positive_fraction", self.goals.positive_fraction),
            entry("train.checkpoint_every", self.checkpoint_every),
            entry("train.guard_window", self.guard_window),
            scaled("flat.steps", self.flat_steps, "trained to convergence"),
            entry("flat.target_entropy", self.flat_target_entropy),
            entry("flat.temperature_start", self.flat_temperature_start),
            entry("flat.temperature_end", self.flat_temperature_end),
            scaled("eval.n_chains", self.eval_chains, "500"),
            scaled("eval.n_two_task", self.eval_two_task, "1000"),
            entry("eval.n_hard", self.eval_hard),
            entry("eval.seeds", seeds.join(",")),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let (l, c) = (&mut self.lmp, &mut self.cql);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "collect.episodes" => self.collect_episodes = parse(key, v)?,
            "collect.steps_per_episode" => self.collect_steps = parse(key, v)?,
            "collect.noise_std" => self.collect_noise = parse(key, v)?,
            "lmp.beta" => l.beta = parse(key, v)?,
            "lmp.kl_alpha" => l.kl_alpha = parse(key, v)?,
            "lmp.batch" => l.batch = parse(key, v)?,
            "lmp.lr" => l.lr = parse(key, v)?,
            "lmp.latent_dim" => l.latent_dim = parse(key, v)?,
            "lmp.embed_dim" => l.embed_dim = parse(key, v)?,
            "lmp.model_width" => l.model_width = parse(key, v)?,
            "lmp.heads" => l.heads = parse(key, v)?,
            "lmp.ff_width" => l.ff_width = parse(key, v)?,
            "lmp.blocks" => l.blocks = parse(key, v)?,
            "lmp.prior_width" => l.prior_width = parse(key, v)?,
            "lmp.prior_layers" => l.prior_layers = parse(key, v)?,
            "lmp.decoder_hidden" => l.decoder_hidden = parse(key, v)?,
            "lmp.decoder_layers" => l.decoder_layers = parse(key, v)?,
            "lmp.cell" => {
                l.cell = match v {
                    "gru" => CellKind::Gru,
                    "tanh" => CellKind::Tanh,
                    _ => return Err(format!("config key '{key}': expected gru or tanh, got '{v}'")),
                }
            }
            "lmp.components" => l.components = parse(key, v)?,
            "lmp.bins" => l.bins = parse(key, v)?,
            "lmp.epochs" => self.lmp_epochs = parse(key, v)?,
            "lmp.steps_per_epoch" => self.lmp_steps_per_epoch = parse(key, v)?,
            "hrl.critic_lr" => c.critic_lr = parse(key, v)?,
            "hrl.actor_lr" => c.actor_lr = parse(key, v)?,
            "hrl.entropy_lr" => c.entropy_lr = parse(key, v)?,
            "hrl.gamma" => c.gamma = parse(key, v)?,
            "hrl.tau" => c.tau = parse(key, v)?,
            "hrl.cql_alpha" => c.cql_alpha = parse(key, v)?,
            "hrl.n_samples" => c.n_samples = parse(key, v)?,
            "hrl.bc_epochs" => c.bc_epochs = parse(key, v)?,
            "hrl.target_entropy" => c.target_entropy = parse(key, v)?,
            "hrl.initial_entropy_coef" => c.initial_entropy_coef = parse(key, v)?,
            "hrl.clip_targets" => c.clip_targets = parse_bool(key, v)?,
            "hrl.batch" => c.batch = parse(key, v)?,
            "hrl.critic_embed_dim" => c.critic.embed_dim = parse(key, v)?,
            "hrl.critic_width" => c.critic.width = parse(key, v)?,
            "hrl.critic_layers" => c.critic.layers = parse(key, v)?,
            "hrl.steps" => self.hrl_steps = parse(key, v)?,
            "hrl.pool_size" => self.hrl_pool = parse(key, v)?,
            "goals.p" => self.goals.p = parse(key, v)?,
            "goals.k" => self.goals.k = parse(key, v)?,
            "goals.positive_fraction" => self.goals.positive_fraction = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.guard_window" => self.guard_window = parse(key, v)?,
            "flat.steps" => self.flat_steps = parse(key, v)?,
            "flat.target_entropy" => self.flat_target_entropy = parse(key, v)?,
            "flat.temperature_start" => self.flat_temperature_start = parse(key, v)?,
            "flat.temperature_end" => self.flat_temperature_end = parse(key, v)?,
            "eval.n_chains" => self.eval_chains = parse(key, v)?,
            "eval.n_two_task" => self.eval_two_task = parse(key, v)?,
            "eval.n_hard" => self.eval_hard = parse(key, v)?,
            "eval.seeds" => {
                self.eval_seeds = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| format!("line {}: expected 'key = value', got '{line}'", i + 1))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(format!("line {}: config key '{k}' set twice", i + 1));
            }
            cfg.set(k, v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse_text(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), String> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| format!("override '{o}' is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), String> {
        self.lmp.validate()?;
        self.cql.validate()?;
        self.goals.validate()?;
        if self.collect_episodes == 0 || self.collect_steps < 16 {
            return Err("collect needs at least one episode of 16 steps".into());
        }
        if self.lmp_epochs == 0 || self.lmp_steps_per_epoch == 0 {
            return Err("lmp.epochs and lmp.steps_per_epoch must be positive".into());
        }
        if self.hrl_pool == 0 {
            return Err("hrl.pool_size must be positive".into());
        }
        Ok(())
    }

    /// Canonical text: every entry, scaled ones flagged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            match e.scaled {
                Some(r) => out.push_str(&format!("{} = {}  # scaled (reference: {r})\n", e.key, e.value)),
                None => out.push_str(&format!("{} = {}\n", e.key, e.value)),
            }
        }
        out
    }

    /// SHA-256 over the canonical `key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for e in self.entries() {
            h.update(format!("{}={}\n", e.key, e.value).as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        if self.eval_seeds.is_empty() {
            vec![self.seed]
        } else {
            self.eval_seeds.clone()
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig { noise_std: self.collect_noise, ..Default::default() }
    }

    pub fn lmp_train(&self, out_dir: Option<PathBuf>, resume: bool) -> LmpTrainConfig {
        LmpTrainConfig {
            epochs: self.lmp_epochs,
            steps_per_epoch: self.lmp_steps_per_epoch,
            seed: self.seed,
            out_dir,
            resume,
        }
    }

    pub fn hrl_train(&self, out_dir: Option<PathBuf>) -> HrlTrainConfig {
        HrlTrainConfig {
            steps: self.hrl_steps,
            seed: self.seed,
            pool_size: self.hrl_pool,
            checkpoint_every: self.checkpoint_every,
            guard_window: self.guard_window,
            out_dir,
        }
    }

    pub fn flat_train(&self, out_dir: Option<PathBuf>) -> FlatCqlConfig {
        FlatCqlConfig {
            steps: self.flat_steps,
            seed: self.seed,
            target_entropy: self.flat_target_entropy,
            temperature_start: self.flat_temperature_start,
            temperature_end: self.flat_temperature_end,
            checkpoint_every: self.checkpoint_every,
            guard_window: self.guard_window,
            out_dir,
        }
    }

    /// Single-step goal sampling for the flat baseline.
    pub fn flat_goals(&self) -> GoalSamplerConfig {
        GoalSamplerConfig { k: 2, ..self.goals }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_roundtrips() {
        let mut c = Config { eval_seeds: vec![3, 4], ..Config::default() };
        c.lmp.cell = CellKind::Gru;
        let back = Config::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse_text("seed = 1\nhrl.gama = 0.9\n").unwrap_err();
        assert!(err.contains("hrl.gama"), "{err}");
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(Config::parse_text("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = Config::default();
        let mut b = a.clone();
        b.apply_overrides(&["hrl.steps=7".into()]).unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
