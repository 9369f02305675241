use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{lmp_loss, window_noise, LmpBundle, LmpError, LmpHyperParams};
use crate::datastore::{sample_window, Dataset};
use crate::numcore::{checkpoint, AdamState, Graph, Tensor};

pub const LMP_LOG_HEADER: &str = "step,nll,kl,total,grad_norm";

#[derive(Clone, Debug)]
pub struct LmpTrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Where checkpoints and the CSV log go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from the newest epoch checkpoint in `out_dir`.
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmpLogRow {
    pub step: usize,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LmpLogRow {
    fn to_line(self) -> String {
        format!("{},{},{},{},{}", self.step, self.nll, self.kl, self.total, self.grad_norm)
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            nll: f[1].parse().ok()?,
            kl: f[2].parse().ok()?,
            total: f[3].parse().ok()?,
            grad_norm: f[4].parse().ok()?,
        })
    }
}

pub fn read_lmp_log(path: &Path) -> Result<Vec<LmpLogRow>, LmpError> {
    let text = fs::read_to_string(path).map_err(|e| LmpError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .map(|l| LmpLogRow::parse(l).ok_or_else(|| LmpError::Io(format!("{}: bad log line '{l}'", path.display()))))
        .collect()
}

fn write_log(path: &Path, rows: &[LmpLogRow]) -> Result<(), LmpError> {
    let mut text = String::from(LMP_LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| LmpError::Io(format!("{}: {e}", path.display())))
}

fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("lmp_epoch_{epoch:03}.ckpt"))
}

fn latest_epoch(dir: &Path, epochs: usize) -> Option<usize> {
    (0..epochs).rev().find(|&e| epoch_checkpoint(dir, e).exists())
}

struct Optimizers([AdamState; 3]);

impl Optimizers {
    fn new(b: &LmpBundle) -> Self {
        let lr = b.hp.lr;
        Self([
            AdamState::new(&b.encoder.store, lr),
            AdamState::new(&b.prior.store, lr),
            AdamState::new(&b.decoder.store, lr),
        ])
    }

    fn blocks(&self, b: &LmpBundle) -> Vec<(String, Tensor)> {
        let names = ["adam.encoder.", "adam.prior.", "adam.decoder."];
        self.0.iter().zip(b.stores()).zip(names).flat_map(|((a, s), n)| a.to_blocks(s, n)).collect()
    }

    fn load(&mut self, b: &LmpBundle, blocks: &HashMap<String, Tensor>) -> Result<(), LmpError> {
        let names = ["adam.encoder.", "adam.prior.", "adam.decoder."];
        for ((a, s), n) in self.0.iter_mut().zip(b.stores()).zip(names) {
            a.load_blocks(s, blocks, n)?;
        }
        Ok(())
    }
}

/// Per-epoch sampling stream, so a resumed run draws the same batches.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Train encoder, prior and decoder jointly with Adam.
///
/// One epoch is `steps_per_epoch` batches of freshly sampled windows. With an
/// output directory, every epoch writes `lmp_epoch_NNN.ckpt` (parameters
/// and optimizer moments) and rewrites `lmp_log.csv`; the final model goes
/// to `lmp.ckpt`.
pub fn train_lmp(
    ds: &Dataset,
    hp: &LmpHyperParams,
    cfg: &LmpTrainConfig,
) -> Result<(LmpBundle, Vec<LmpLogRow>), LmpError> {
    hp.validate().map_err(|e| LmpError::Num(crate::numcore::NumError::Domain(e)))?;
    let mut bundle = LmpBundle::new(hp, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut opt = Optimizers::new(&bundle);
    let mut rows: Vec<LmpLogRow> = Vec::new();
    let mut start_epoch = 0;

    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| LmpError::Io(format!("{}: {e}", dir.display())))?;
        if cfg.resume {
            if let Some(e) = latest_epoch(dir, cfg.epochs) {
                let blocks = checkpoint::load(&epoch_checkpoint(dir, e))?;
                bundle.load_blocks(&blocks)?;
                opt.load(&bundle, &blocks)?;
                rows = read_lmp_log(&dir.join("lmp_log.csv"))?;
                rows.truncate((e + 1) * cfg.steps_per_epoch);
                start_epoch = e + 1;
            }
        }
    }

    let mut epoch_means: Vec<f64> = rows
        .chunks(cfg.steps_per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect();

    for epoch in start_epoch..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let windows: Vec<_> = (0..hp.batch).map(|_| sample_window(&mut rng, ds)).collect();
            let noise = window_noise(&mut rng, hp.batch, hp.latent_dim);
            let mut g = Graph::new();
            let (loss, parts) = lmp_loss(&mut g, &bundle, &windows, &noise)?;
            let grads = g.backward(loss)?;
            let grad_norm = bundle.stores().iter().map(|s| grads.norm(s).powi(2)).sum::<f64>().sqrt();
            opt.0[0].step(&mut bundle.encoder.store, &grads)?;
            opt.0[1].step(&mut bundle.prior.store, &grads)?;
            opt.0[2].step(&mut bundle.decoder.store, &grads)?;
            sum += parts.total;
            rows.push(LmpLogRow { step: rows.len(), nll: parts.nll, kl: parts.kl, total: parts.total, grad_norm });
        }
        let mean = sum / cfg.steps_per_epoch.max(1) as f64;
        epoch_means.push(mean);
        if let Some(dir) = &cfg.out_dir {
            let mut blocks = bundle.blocks();
            blocks.extend(opt.blocks(&bundle));
            checkpoint::save(&epoch_checkpoint(dir, epoch), &blocks)?;
            write_log(&dir.join("lmp_log.csv"), &rows)?;
        }
        let initial = epoch_means[0];
        let n = epoch_means.len();
        if n >= 3 && epoch_means[n - 3..].iter().all(|m| m.abs() > 10.0 * initial.abs()) {
            return Err(LmpError::Divergence { epoch, loss: mean, initial });
        }
    }
    if let Some(dir) = &cfg.out_dir {
        bundle.save(&dir.join("lmp.ckpt"))?;
    }
    Ok((bundle, rows))
}
