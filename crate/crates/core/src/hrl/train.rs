use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::cql::{bc_warmstart, cql_actor_loss, cql_critic_loss, encode_windows, CqlNoise, EntropyTuner};
use super::critic::{soft_update, Critic};
use super::goals::{sample_goal, GoalSamplerConfig};
use super::{CqlHyperParams, HrlError, PlanTransition};
use crate::datastore::{Dataset, ProprioIndex, Window};
use crate::lmp::{LmpBundle, LmpHyperParams, PlanPrior};
use crate::numcore::{checkpoint, AdamState, Graph, NumError, Tensor};

pub const HRL_LOG_HEADER: &str = "step,critic_loss,actor_loss,cons_gap,entropy_coef,mean_q,frac_r1";

/// A transition start `(episode, t)` with its encoder plan. Goals are drawn
/// afresh every time the entry is used.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub episode: usize,
    pub t: usize,
    pub z: Vec<f64>,
    pub log_q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPool {
    pub entries: Vec<PoolEntry>,
    /// Steps from `s_t` to `s_next`.
    pub stride: usize,
}

impl TransitionPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Relabel the chosen entries with fresh goals.
    pub fn transitions<R: Rng>(
        &self,
        picks: &[usize],
        ds: &Dataset,
        index: &ProprioIndex,
        goals: &GoalSamplerConfig,
        rng: &mut R,
    ) -> Vec<PlanTransition> {
        picks
            .iter()
            .map(|&i| {
                let e = &self.entries[i];
                let ep = ds.episode(e.episode);
                let gs = sample_goal(rng, goals, ds, index, e.episode, e.t);
                PlanTransition {
                    s_t: ep.observation(e.t),
                    z: e.z.clone(),
                    z_log_density: e.log_q,
                    s_next: ep.observation(e.t + self.stride),
                    s_g: gs.goal,
                    reward: gs.reward,
                    terminal: gs.reward == 1.0,
                }
            })
            .collect()
    }
}

/// Encode `size` windows of exactly `k` steps with the frozen encoder.
pub fn build_pool<R: Rng>(
    ds: &Dataset,
    lmp: &LmpBundle,
    size: usize,
    k: usize,
    rng: &mut R,
) -> Result<TransitionPool, HrlError> {
    const CHUNK: usize = 256;
    let latent = lmp.hp.latent_dim;
    let mut entries = Vec::with_capacity(size);
    while entries.len() < size {
        let n = CHUNK.min(size - entries.len());
        let windows: Vec<Window> = (0..n)
            .map(|_| {
                let (episode, _) = ds.locate(rng.random_range(0..ds.total_steps()));
                let t = rng.random_range(0..=ds.episode(episode).len() - k);
                Window::extract(ds, episode, t, k)
            })
            .collect();
        let noise: Vec<f64> = (0..n * latent).map(|_| rng.sample(StandardNormal)).collect();
        let zs = encode_windows(&lmp.encoder, &windows, &noise)?;
        entries.extend(windows.iter().zip(zs).map(|(w, (z, log_q))| PoolEntry {
            episode: w.episode,
            t: w.start,
            z,
            log_q,
        }));
    }
    Ok(TransitionPool { entries, stride: k - 1 })
}

/// Actor, twin critics and their targets, plus the entropy coefficient.
#[derive(Clone, Debug)]
pub struct HrlBundle {
    pub actor: PlanPrior,
    pub critics: [Critic; 2],
    pub targets: [Critic; 2],
    pub log_entropy_coef: f64,
}

impl HrlBundle {
    pub fn blocks(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let stores = [
            ("actor.", &self.actor.store),
            ("critic0.", &self.critics[0].store),
            ("critic1.", &self.critics[1].store),
            ("target0.", &self.targets[0].store),
            ("target1.", &self.targets[1].store),
        ];
        for (prefix, s) in stores {
            out.extend(s.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        out.push(("log_entropy_coef".into(), Tensor::scalar(self.log_entropy_coef)));
        out
    }

    pub fn load_blocks(&mut self, blocks: &HashMap<String, Tensor>) -> Result<(), NumError> {
        self.actor.store.load_named(blocks, "actor.")?;
        for i in 0..2 {
            self.critics[i].store.load_named(blocks, &format!("critic{i}."))?;
            self.targets[i].store.load_named(blocks, &format!("target{i}."))?;
        }
        self.log_entropy_coef = blocks
            .get("log_entropy_coef")
            .ok_or_else(|| NumError::Checkpoint("missing log_entropy_coef".into()))?
            .item();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        checkpoint::save(path, &self.blocks())
    }

    pub fn load(path: &Path, lmp_hp: &LmpHyperParams, hp: &CqlHyperParams) -> Result<Self, NumError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = PlanPrior::new(lmp_hp, &mut rng);
        let critic = Critic::new(&hp.critic, lmp_hp.latent_dim, &mut rng);
        let mut b = Self {
            actor,
            critics: [critic.clone(), critic.clone()],
            targets: [critic.clone(), critic],
            log_entropy_coef: 0.0,
        };
        b.load_blocks(&checkpoint::load(path)?)?;
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HrlLogRow {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub cons_gap: f64,
    pub entropy_coef: f64,
    pub mean_q: f64,
    pub frac_r1: f64,
}

impl HrlLogRow {
    pub fn to_line(self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.critic_loss, self.actor_loss, self.cons_gap, self.entropy_coef, self.mean_q, self.frac_r1
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            critic_loss: f[1].parse().ok()?,
            actor_loss: f[2].parse().ok()?,
            cons_gap: f[3].parse().ok()?,
            entropy_coef: f[4].parse().ok()?,
            mean_q: f[5].parse().ok()?,
            frac_r1: f[6].parse().ok()?,
        })
    }
}

pub fn read_hrl_log(path: &Path) -> Result<Vec<HrlLogRow>, HrlError> {
    let text = fs::read_to_string(path).map_err(|e| HrlError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    // the flat baseline prefixes a method column
    let skip = usize::from(header.starts_with("method,"));
    lines
        .map(|l| {
            let rest = if skip == 1 { l.split_once(',').map_or("", |(_, r)| r) } else { l };
            HrlLogRow::parse(rest).ok_or_else(|| HrlError::Io(format!("{}: bad log line '{l}'", path.display())))
        })
        .collect()
}

pub(crate) fn write_csv(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<(), HrlError> {
    let mut text = String::from(header);
    text.push('\n');
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| HrlError::Io(format!("{}: {e}", path.display())))
}

/// Divergence guard: halts when the mean critic loss of 3 consecutive
/// windows exceeds 10x that of the first window.
#[derive(Clone, Debug)]
pub struct GuardState {
    window: usize,
    initial: Option<f64>,
    acc: f64,
    count: usize,
    strikes: usize,
}

impl GuardState {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), initial: None, acc: 0.0, count: 0, strikes: 0 }
    }

    pub fn push(&mut self, step: usize, loss: f64) -> Result<(), HrlError> {
        self.acc += loss;
        self.count += 1;
        if self.count < self.window {
            return Ok(());
        }
        let mean = self.acc / self.count as f64;
        self.acc = 0.0;
        self.count = 0;
        match self.initial {
            None => self.initial = Some(mean),
            Some(initial) => {
                if mean.abs() > 10.0 * initial.abs() {
                    self.strikes += 1;
                    if self.strikes >= 3 {
                        return Err(HrlError::Divergence { step, loss: mean, initial });
                    }
                } else {
                    self.strikes = 0;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HrlTrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub pool_size: usize,
    pub checkpoint_every: usize,
    pub guard_window: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for HrlTrainConfig {
    fn default() -> Self {
        Self { steps: 5000, seed: 0, pool_size: 20_000, checkpoint_every: 1000, guard_window: 500, out_dir: None }
    }
}

fn batch_summary(batch: &[PlanTransition]) -> String {
    batch.iter().map(|t| format!("r={}", t.reward)).collect::<Vec<_>>().join(" ")
}

/// Full high-level training: encode the transition pool, warm-start the actor
/// by behaviour cloning, then alternate critic and actor updates 1:1 with a
/// soft target update after every step.
pub fn train_hrl(
    ds: &Dataset,
    lmp: &LmpBundle,
    hp: &CqlHyperParams,
    goals: &GoalSamplerConfig,
    cfg: &HrlTrainConfig,
) -> Result<(HrlBundle, Vec<HrlLogRow>), HrlError> {
    hp.validate().map_err(HrlError::Config)?;
    goals.validate().map_err(HrlError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let index = ProprioIndex::build(ds);
    let pool = build_pool(ds, lmp, cfg.pool_size, goals.k, &mut rng)?;

    let mut actor = lmp.prior.clone();
    actor.store.set_trainable(true);
    let bc = bc_warmstart(&mut actor, &pool, ds, hp, hp.bc_epochs, &mut rng)?;

    let latent = lmp.hp.latent_dim;
    let critics = [Critic::new(&hp.critic, latent, &mut rng), Critic::new(&hp.critic, latent, &mut rng)];
    let mut targets = critics.clone();
    for t in &mut targets {
        t.store.set_trainable(false);
    }
    let mut b = HrlBundle { actor, critics, targets, log_entropy_coef: 0.0 };
    let mut critic_opt =
        [AdamState::new(&b.critics[0].store, hp.critic_lr), AdamState::new(&b.critics[1].store, hp.critic_lr)];
    let mut actor_opt = AdamState::new(&b.actor.store, hp.actor_lr);
    let mut tuner = EntropyTuner::new(hp.initial_entropy_coef, hp.target_entropy, hp.entropy_lr);
    let mut guard = GuardState::new(cfg.guard_window);
    let mut rows = Vec::with_capacity(cfg.steps);

    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| HrlError::Io(format!("{}: {e}", dir.display())))?;
        write_csv(&dir.join("hrl_bc.csv"), "epoch,bc_loss", bc.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
    }

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..hp.batch).map(|_| rng.random_range(0..pool.len())).collect();
        let items = pool.transitions(&picks, ds, &index, goals, &mut rng);
        let batch = PlanTransition::batch(&items);
        let noise = CqlNoise::sample(&mut rng, hp.batch, hp.n_samples, latent);

        let mut g = Graph::new();
        let (closs, cparts) = cql_critic_loss(
            &mut g,
            &batch,
            [&b.critics[0], &b.critics[1]],
            [&b.targets[0], &b.targets[1]],
            &b.actor,
            hp,
            &noise,
        )?;
        if !cparts.total.is_finite() {
            return Err(HrlError::NonFinite { what: "critic loss".into(), step, batch: batch_summary(&items) });
        }
        let grads = g.backward(closs)?;
        for (opt, c) in critic_opt.iter_mut().zip(b.critics.iter_mut()) {
            opt.step(&mut c.store, &grads)?;
        }

        let coef = tuner.coef();
        let actor_noise: Vec<f64> = (0..hp.batch * latent).map(|_| rng.sample(StandardNormal)).collect();
        let mut g = Graph::new();
        let (aloss, aparts) =
            cql_actor_loss(&mut g, &batch, [&b.critics[0], &b.critics[1]], &b.actor, coef, actor_noise)?;
        if !aparts.loss.is_finite() {
            return Err(HrlError::NonFinite { what: "actor loss".into(), step, batch: batch_summary(&items) });
        }
        let grads = g.backward(aloss)?;
        actor_opt.step(&mut b.actor.store, &grads)?;
        tuner.update(aparts.mean_logp)?;

        let [t0, t1] = &mut b.targets;
        soft_update(&[&b.critics[0], &b.critics[1]], &mut [t0, t1], hp.tau)?;

        rows.push(HrlLogRow {
            step,
            critic_loss: cparts.total,
            actor_loss: aparts.loss,
            cons_gap: cparts.cons_gap,
            entropy_coef: coef,
            mean_q: cparts.mean_q,
            frac_r1: batch.reward.iter().sum::<f64>() / batch.rows as f64,
        });
        guard.push(step, cparts.total)?;

        let last = step + 1 == cfg.steps;
        if let Some(dir) = &cfg.out_dir {
            if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
                b.log_entropy_coef = tuner.log_coef();
                b.save(&dir.join(format!("hrl_step_{:06}.ckpt", step + 1)))?;
                write_csv(&dir.join("hrl_log.csv"), HRL_LOG_HEADER, rows.iter().map(|r| r.to_line()))?;
            }
        }
    }
    b.log_entropy_coef = tuner.log_coef();
    if let Some(dir) = &cfg.out_dir {
        b.save(&dir.join("hrl.ckpt"))?;
    }
    Ok((b, rows))
}
