//! Command-line driver: collect, train, evaluate and inspect, with a run
//! manifest in every artifact directory.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::baselines::{lmp_inference_policy, train_flat_cql, FlatBundle, FlatCqlPolicy};
use crate::datastore::{load_dataset, write_dataset, DataError, Dataset};
use crate::env::{scripted_collect, SegmentLog};
use crate::evalharness::{emit_report, generate_specs, run_specs, taco_policy, EvalRow, Policy, Protocol};
use crate::hrl::{train_hrl, HrlBundle, HrlError};
use crate::lmp::{train_lmp, LmpBundle, LmpError};

pub use config::{file_sha256, hex, Config, Entry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Name of the run manifest written next to every command's outputs.
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<LmpError> for CliError {
    fn from(e: LmpError) -> Self {
        match e {
            LmpError::Divergence { .. } | LmpError::NonFinite(_) => CliError::Diverged(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<HrlError> for CliError {
    fn from(e: HrlError) -> Self {
        match e {
            HrlError::Divergence { .. } | HrlError::NonFinite { .. } => CliError::Diverged(e.to_string()),
            HrlError::Config(m) => CliError::Config(m),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<crate::numcore::NumError> for CliError {
    fn from(e: crate::numcore::NumError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "taco", about = "Hierarchical offline RL from play data on a 2-D play table")]
pub struct Cli {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set hrl.steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Lmp,
    #[value(name = "cql-her")]
    CqlHer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Taco,
    Lmp,
    #[value(name = "cql-her")]
    CqlHer,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Taco => "taco",
            Method::Lmp => "lmp",
            Method::CqlHer => "cql-her",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll the scripted play controller and write the dataset.
    Collect {
        /// Replace a non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the latent-plan model (encoder, prior, decoder).
    TrainLmp {
        /// Continue from the newest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the high-level policy on top of a trained latent-plan model.
    TrainHrl {
        /// Output subdirectory under out_dir, e.g. for ablations.
        #[arg(long, default_value = "hrl")]
        run: String,
    },
    /// Train a comparison method.
    TrainBaseline {
        #[arg(value_enum)]
        which: Baseline,
    },
    /// Evaluate a trained method on one protocol.
    Eval {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        /// High-level run to load for `taco`.
        #[arg(long, default_value = "hrl")]
        run: String,
    },
    /// Print dataset statistics.
    Inspect,
    /// Print the resolved configuration.
    Config,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse()
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("taco: {e}");
            e.exit_code()
        }
    }
}

/// Resolve the config: file (or defaults), then `--set` overrides, then
/// the `TACO_SEED` environment variable.
pub fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(CliError::Config)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides).map_err(CliError::Config)?;
    if let Ok(s) = std::env::var("TACO_SEED") {
        cfg.seed = s.trim().parse().map_err(|_| CliError::Config(format!("TACO_SEED is not an integer: '{s}'")))?;
    }
    Ok(cfg)
}

/// Execute one command; returns the text printed on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Collect { force } => collect(&cfg, *force),
        Command::TrainLmp { resume } => train_lmp_cmd(&cfg, *resume, "train-lmp"),
        Command::TrainHrl { run } => train_hrl_cmd(&cfg, run),
        Command::TrainBaseline { which: Baseline::Lmp } => train_lmp_cmd(&cfg, false, "train-baseline lmp"),
        Command::TrainBaseline { which: Baseline::CqlHer } => train_flat_cmd(&cfg),
        Command::Eval { method, protocol, run } => eval_cmd(&cfg, *method, *protocol, run),
        Command::Inspect => inspect(&cfg),
        Command::Config => Ok(cfg.to_text()),
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Record how an artifact directory was produced.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &Config,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let digest = |paths: &[PathBuf]| -> Result<Vec<serde_json::Value>, CliError> {
        paths
            .iter()
            .map(|p| {
                Ok(json!({ "path": p.display().to_string(), "sha256": file_sha256(p).map_err(CliError::Runtime)? }))
            })
            .collect()
    };
    let config: serde_json::Map<String, serde_json::Value> =
        cfg.entries().into_iter().map(|e| (e.key.to_string(), json!(e.value))).collect();
    let m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": config,
        "inputs": digest(inputs)?,
        "outputs": digest(outputs)?,
    });
    let path = dir.join(RUN_MANIFEST);
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io(&path))
}

fn load_data(cfg: &Config) -> Result<Dataset, CliError> {
    let manifest = cfg.data_dir.join("manifest.json");
    if !manifest.exists() {
        return Err(CliError::Runtime(format!("no dataset at {}", cfg.data_dir.display())));
    }
    Ok(load_dataset(&cfg.data_dir)?)
}

fn lmp_dir(cfg: &Config) -> PathBuf {
    cfg.out_dir.join("lmp")
}

fn load_lmp(cfg: &Config) -> Result<(LmpBundle, PathBuf), CliError> {
    let path = lmp_dir(cfg).join("lmp.ckpt");
    if !path.exists() {
        return Err(CliError::Runtime(format!("no latent-plan checkpoint at {}", path.display())));
    }
    Ok((LmpBundle::load(&path, &cfg.lmp)?, path))
}

fn collect(cfg: &Config, force: bool) -> Result<String, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = scripted_collect(&mut rng, cfg.collect_episodes, cfg.collect_steps, cfg.controller());
    let segments: Vec<SegmentLog> = eps.iter().flat_map(|e| e.segments.iter().cloned()).collect();
    let records: Vec<_> = eps.into_iter().map(|e| e.record).collect();
    let m = write_dataset(&records, &cfg.data_dir, Some(cfg.seed), force)?;
    let seg_path = cfg.data_dir.join("segments.csv");
    let text = String::from("episode,step_start,step_end,affordance\n") + &SegmentLog::write_all(&segments);
    fs::write(&seg_path, text).map_err(io(&seg_path))?;
    let manifest = cfg.data_dir.join("manifest.json");
    write_manifest(&cfg.data_dir, "collect", cfg, &[], &[manifest, seg_path])?;
    Ok(format!("collected {} episodes, {} steps into {}\n", m.episode_count, m.total_steps(), cfg.data_dir.display()))
}

fn train_lmp_cmd(cfg: &Config, resume: bool, command: &str) -> Result<String, CliError> {
    let ds = load_data(cfg)?;
    let dir = lmp_dir(cfg);
    let (_, rows) = train_lmp(&ds, &cfg.lmp, &cfg.lmp_train(Some(dir.clone()), resume))?;
    let outputs = vec![dir.join("lmp.ckpt"), dir.join("lmp_log.csv")];
    write_manifest(&dir, command, cfg, &[cfg.data_dir.join("manifest.json")], &outputs)?;
    let last = rows.last().map_or(f64::NAN, |r| r.total);
    Ok(format!("trained latent-plan model for {} steps (final loss {last:.4}) into {}\n", rows.len(), dir.display()))
}

fn train_hrl_cmd(cfg: &Config, run: &str) -> Result<String, CliError> {
    let ds = load_data(cfg)?;
    let (lmp, lmp_path) = load_lmp(cfg)?;
    let dir = cfg.out_dir.join(run);
    let (_, rows) = train_hrl(&ds, &lmp, &cfg.cql, &cfg.goals, &cfg.hrl_train(Some(dir.clone())))?;
    let outputs = vec![dir.join("hrl.ckpt"), dir.join("hrl_log.csv")];
    write_manifest(&dir, "train-hrl", cfg, &[cfg.data_dir.join("manifest.json"), lmp_path], &outputs)?;
    let last = rows.last().map_or(f64::NAN, |r| r.critic_loss);
    Ok(format!(
        "trained high-level policy for {} steps (final critic loss {last:.4}) into {}\n",
        rows.len(),
        dir.display()
    ))
}

fn train_flat_cmd(cfg: &Config) -> Result<String, CliError> {
    let ds = load_data(cfg)?;
    let dir = cfg.out_dir.join("cql-her");
    let (_, rows) = train_flat_cql(&ds, &cfg.cql, &cfg.flat_goals(), &cfg.flat_train(Some(dir.clone())))?;
    let outputs = vec![dir.join("flat.ckpt"), dir.join("flat_log.csv")];
    write_manifest(&dir, "train-baseline cql-her", cfg, &[cfg.data_dir.join("manifest.json")], &outputs)?;
    let last = rows.last().map_or(f64::NAN, |r| r.critic_loss);
    Ok(format!("trained flat CQL+HER for {} steps (final critic loss {last:.4}) into {}\n", rows.len(), dir.display()))
}

fn spec_count(cfg: &Config, protocol: Protocol) -> usize {
    match protocol {
        Protocol::Chain5 => cfg.eval_chains,
        Protocol::SingleGoalTwoTask => cfg.eval_two_task,
        Protocol::Hard => cfg.eval_hard,
    }
}

fn eval_cmd(cfg: &Config, method: Method, protocol: Protocol, run: &str) -> Result<String, CliError> {
    let (mut policy, inputs, label): (Box<dyn Policy>, Vec<PathBuf>, String) = match method {
        Method::Taco => {
            let (lmp, lmp_path) = load_lmp(cfg)?;
            let path = cfg.out_dir.join(run).join("hrl.ckpt");
            if !path.exists() {
                return Err(CliError::Runtime(format!("no high-level checkpoint at {}", path.display())));
            }
            let hrl = HrlBundle::load(&path, &cfg.lmp, &cfg.cql)?;
            let label = if run == "hrl" { "taco".to_string() } else { run.to_string() };
            (Box::new(taco_policy(&hrl, &lmp)), vec![lmp_path, path], label)
        }
        Method::Lmp => {
            let (lmp, lmp_path) = load_lmp(cfg)?;
            (Box::new(lmp_inference_policy(&lmp)), vec![lmp_path], "lmp".into())
        }
        Method::CqlHer => {
            let path = cfg.out_dir.join("cql-her").join("flat.ckpt");
            if !path.exists() {
                return Err(CliError::Runtime(format!("no flat checkpoint at {}", path.display())));
            }
            let flat = FlatBundle::load(&path, &cfg.cql.critic)?;
            (Box::new(FlatCqlPolicy { actor: flat.actor }), vec![path], "cql-her".into())
        }
    };
    let mut rows = Vec::new();
    for seed in cfg.eval_seeds() {
        let specs = generate_specs(protocol, spec_count(cfg, protocol), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let outcomes = run_specs(policy.as_mut(), &specs, &mut rng)?;
        rows.extend(EvalRow::from_outcomes(&label, seed, &outcomes));
    }
    let dir = cfg.out_dir.join("eval").join(&label).join(protocol.name());
    let summary = emit_report(&dir, &label, protocol.name(), &rows).map_err(io(&dir))?;
    write_manifest(
        &dir,
        &format!("eval {} {}", method.name(), protocol.name()),
        cfg,
        &inputs,
        &[dir.join("report.csv"), dir.join("summary.json")],
    )?;
    let sr: Vec<String> = summary.sr.iter().map(|v| format!("{v:.3}")).collect();
    Ok(format!(
        "{label} on {}: sr [{}] avg_len {:.3} ± {:.3} -> {}\n",
        protocol.name(),
        sr.join(", "),
        summary.avg_len_mean,
        summary.avg_len_std,
        dir.display()
    ))
}

fn inspect(cfg: &Config) -> Result<String, CliError> {
    let ds = load_data(cfg)?;
    let lens: Vec<usize> = ds.episodes().iter().map(|e| e.len()).collect();
    let min = lens.iter().min().copied().unwrap_or(0);
    let max = lens.iter().max().copied().unwrap_or(0);
    let seed = ds.collector_seed.map_or("unknown".to_string(), |s| s.to_string());
    let first = ds.episode(0);
    Ok(format!(
        "dataset: {}\nepisodes: {}\ntotal_steps: {}\nepisode_length: min {min} max {max} mean {:.1}\nobs_dim: {}\nact_dim: {}\ncollector_seed: {seed}\n",
        cfg.data_dir.display(),
        ds.len(),
        ds.total_steps(),
        ds.total_steps() as f64 / ds.len() as f64,
        first.obs_dim,
        first.act_dim,
    ))
}
