//! Flat CQL with hindsight relabeling over primitive actions.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datastore::{Dataset, ProprioIndex};
use crate::env::{EnvAction, Observation, ACT_DIM, OBS_DIM};
use crate::evalharness::Policy;
use crate::hrl::{
    bootstrap_targets, conservative_critic_loss, sample_goal, soft_update, uniform_candidates, Candidates,
    CqlHyperParams, Critic, CriticLossParts, CriticShape, EntropyTuner, GoalSamplerConfig, GuardState, HrlError,
    HrlLogRow, TransitionBatch,
};
use crate::lmp::{action_from_targets, action_targets, StateEmbedder};
use crate::numcore::dist::{tanh_gaussian_rsample, GaussianVars};
use crate::numcore::nn::{Activation, Mlp};
use crate::numcore::{checkpoint, AdamState, Graph, NumError, ParamStore, Tensor, Var};

pub const FLAT_LOG_HEADER: &str = "method,step,critic_loss,actor_loss,cons_gap,entropy_coef,mean_q,frac_r1";

/// Continuous action dimensions; the gripper is the third.
const CONT: usize = 2;

/// Single-step relabeled transition `(s_t, a_t, s_{t+1}, s_g, r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatTransition {
    pub s_t: Observation,
    pub a_t: EnvAction,
    pub s_next: Observation,
    pub s_g: Observation,
    pub reward: f64,
}

impl FlatTransition {
    /// Critic-space action: deltas scaled to [-1, 1] and the gripper as ±1.
    pub fn critic_action(&self) -> [f64; ACT_DIM] {
        let (d, closed) = action_targets(&self.a_t.to_array());
        [d[0], d[1], 2.0 * closed - 1.0]
    }

    pub fn batch(items: &[FlatTransition]) -> TransitionBatch {
        TransitionBatch {
            rows: items.len(),
            action_dim: ACT_DIM,
            s: items.iter().flat_map(|t| t.s_t.0).collect(),
            a: items.iter().flat_map(|t| t.critic_action()).collect(),
            a_log_density: vec![0.0; items.len()],
            s_next: items.iter().flat_map(|t| t.s_next.0).collect(),
            goal: items.iter().flat_map(|t| t.s_g.0).collect(),
            reward: items.iter().map(|t| t.reward).collect(),
        }
    }
}

/// `n` transitions from uniformly drawn dataset steps. With `k = 2` the goal
/// offset is counted in single steps.
pub fn build_flat_transitions<R: Rng>(
    ds: &Dataset,
    index: &ProprioIndex,
    goals: &GoalSamplerConfig,
    n: usize,
    rng: &mut R,
) -> Vec<FlatTransition> {
    let stride = goals.stride();
    (0..n)
        .map(|_| {
            let (episode, t) = ds.locate(rng.random_range(0..ds.total_steps()));
            let ep = ds.episode(episode);
            let t = t.min(ep.len() - 1 - stride);
            let gs = sample_goal(rng, goals, ds, index, episode, t);
            FlatTransition {
                s_t: ep.observation(t),
                a_t: EnvAction::from_slice(ep.action(t)),
                s_next: ep.observation(t + stride),
                s_g: gs.goal,
                reward: gs.reward,
            }
        })
        .collect()
}

/// Difference of two standard Gumbel draws per row: perturbing the
/// closed-minus-open logit by it samples the two-way categorical.
pub fn gumbel_noise<R: Rng>(rng: &mut R, rows: usize) -> Vec<f64> {
    let mut gumbel = || {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    };
    (0..rows).map(|_| gumbel() - gumbel()).collect()
}

/// Relaxed two-way sample mapped to (-1, 1): `y_closed - y_open` of the
/// Gumbel-softmax at temperature `tau`.
pub fn relaxed_gripper(logit: f64, gumbel: f64, tau: f64) -> f64 {
    ((logit + gumbel) / (2.0 * tau)).tanh()
}

/// Linear anneal from `start` to `end` over `steps`.
pub fn temperature_at(step: usize, steps: usize, start: f64, end: f64) -> f64 {
    if steps <= 1 {
        return end;
    }
    start + (end - start) * (step as f64 / (steps - 1) as f64).min(1.0)
}

/// Noise for one actor sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatNoise {
    pub gauss: Vec<f64>,
    pub gumbel: Vec<f64>,
}

impl FlatNoise {
    pub fn sample<R: Rng>(rng: &mut R, rows: usize) -> Self {
        let gauss = (0..rows * CONT).map(|_| rng.sample(StandardNormal)).collect();
        Self { gauss, gumbel: gumbel_noise(rng, rows) }
    }
}

/// Goal-conditioned actor: tanh-Gaussian deltas and a gripper logit
/// (closed minus open).
#[derive(Clone, Debug)]
pub struct FlatActor {
    pub store: ParamStore,
    embed_s: StateEmbedder,
    embed_g: StateEmbedder,
    mlp: Mlp,
}

impl FlatActor {
    pub fn new<R: Rng>(shape: &CriticShape, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed_s = StateEmbedder::new(&mut store, "embed_s", shape.embed_dim, rng);
        let embed_g = StateEmbedder::new(&mut store, "embed_g", shape.embed_dim, rng);
        let mut sizes = vec![2 * shape.embed_dim];
        sizes.extend(std::iter::repeat_n(shape.width, shape.layers));
        sizes.push(2 * CONT + 1);
        let mlp = Mlp::new(&mut store, "mlp", &sizes, Activation::Relu, Activation::None, rng);
        Self { store, embed_s, embed_g, mlp }
    }

    pub fn head(&self, g: &mut Graph, s: &[f64], goal: &[f64]) -> Result<(GaussianVars, Var), NumError> {
        let st = &self.store;
        let a = self.embed_s.forward(g, st, crate::lmp::obs_features(s))?;
        let b = self.embed_g.forward(g, st, crate::lmp::obs_features(goal))?;
        let x = g.concat_cols(&[a, b])?;
        let out = self.mlp.forward(g, st, x)?;
        let gauss = g.slice_cols(out, 0, 2 * CONT)?;
        let logit = g.slice_cols(out, 2 * CONT, 2 * CONT + 1)?;
        Ok((GaussianVars::from_head(g, gauss, CONT)?, logit))
    }

    /// Reparameterised sample `(rows, 3)` with its log-density. The gripper is
    /// the relaxed value when `hard` is false and ±1 otherwise; its density
    /// term is the categorical probability of the hard outcome.
    pub fn sample(
        &self,
        g: &mut Graph,
        s: &[f64],
        goal: &[f64],
        noise: &FlatNoise,
        tau: f64,
        hard: bool,
    ) -> Result<(Var, Var), NumError> {
        let rows = s.len() / OBS_DIM;
        let (dist, logit) = self.head(g, s, goal)?;
        let (u, lp_c) = tanh_gaussian_rsample(g, dist, noise.gauss.clone())?;
        let gd = g.constant_matrix(rows, 1, noise.gumbel.clone());
        let pert = g.add(logit, gd)?;
        let signs: Vec<f64> = g.value(pert).data().iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect();
        let grip = if hard {
            g.constant_matrix(rows, 1, signs.clone())
        } else {
            let scaled = g.scale(pert, 0.5 / tau);
            g.tanh(scaled)
        };
        // log σ(s · l) = -softplus(-s · l)
        let sv = g.constant_matrix(rows, 1, signs);
        let sl = g.mul(sv, logit)?;
        let nsl = g.neg(sl);
        let sp = g.softplus(nsl);
        let lp_g = g.neg(sp);
        let lp = g.add(lp_c, lp_g)?;
        let a = g.concat_cols(&[u, grip])?;
        Ok((a, lp))
    }

    fn candidates(&self, s: &[f64], goal: &[f64], noise: &FlatNoise) -> Result<Candidates, NumError> {
        let mut g = Graph::new();
        let (a, lp) = self.sample(&mut g, s, goal, noise, 1.0, true)?;
        Ok(Candidates { actions: g.value(a).data().to_vec(), log_density: g.value(lp).data().to_vec() })
    }

    /// Deterministic actions: squashed mean deltas, gripper by the sign of the logit.
    pub fn mean_actions(&self, obs: &[Observation], goals: &[Observation]) -> Result<Vec<EnvAction>, NumError> {
        let mut g = Graph::new();
        let s: Vec<f64> = obs.iter().flat_map(|o| o.0).collect();
        let t: Vec<f64> = goals.iter().flat_map(|o| o.0).collect();
        let (dist, logit) = self.head(&mut g, &s, &t)?;
        let (m, l) = (g.value(dist.mean), g.value(logit));
        Ok((0..obs.len())
            .map(|r| action_from_targets([m.get(r, 0).tanh(), m.get(r, 1).tanh()], l.get(r, 0) > 0.0))
            .collect())
    }
}

/// Pre-drawn randomness for one flat critic update.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatCqlNoise {
    pub target: FlatNoise,
    /// Uniform candidates: deltas on (-1, 1), gripper on {-1, 1}.
    pub uniform: Vec<Vec<f64>>,
    pub policy: Vec<FlatNoise>,
}

impl FlatCqlNoise {
    pub fn sample<R: Rng>(rng: &mut R, rows: usize, n: usize) -> Self {
        let target = FlatNoise::sample(rng, rows);
        let uniform = (0..n)
            .map(|_| {
                (0..rows)
                    .flat_map(|_| {
                        let dx = rng.random_range(-1.0..1.0);
                        let dy = rng.random_range(-1.0..1.0);
                        let gr = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        [dx, dy, gr]
                    })
                    .collect()
            })
            .collect();
        let policy = (0..n).map(|_| FlatNoise::sample(rng, rows)).collect();
        Self { target, uniform, policy }
    }
}

/// Conservative critic loss for primitive actions. The uniform candidate
/// density is `-3 ln 2`: a uniform pair of deltas times a fair gripper coin.
pub fn flat_critic_loss(
    g: &mut Graph,
    batch: &TransitionBatch,
    critics: [&Critic; 2],
    targets: [&Critic; 2],
    actor: &FlatActor,
    hp: &CqlHyperParams,
    noise: &FlatCqlNoise,
) -> Result<(Var, CriticLossParts), NumError> {
    let next = actor.candidates(&batch.s_next, &batch.goal, &noise.target)?;
    let y = bootstrap_targets(batch, targets, &next.actions, hp.gamma, hp.clip_targets)?;
    let mut ood: Vec<Candidates> = noise.uniform.iter().map(|u| uniform_candidates(u.clone(), ACT_DIM)).collect();
    for p in &noise.policy {
        ood.push(actor.candidates(&batch.s, &batch.goal, p)?);
    }
    conservative_critic_loss(g, critics, batch, &y, &ood, hp.cql_alpha)
}

/// `mean(coef · log π - min Q)` with relaxed gripper samples at temperature `tau`.
pub fn flat_actor_loss(
    g: &mut Graph,
    batch: &TransitionBatch,
    critics: [&Critic; 2],
    actor: &FlatActor,
    coef: f64,
    noise: &FlatNoise,
    tau: f64,
) -> Result<(Var, f64), NumError> {
    let (a, lp) = actor.sample(g, &batch.s, &batch.goal, noise, tau, false)?;
    let q1 = critics[0].forward(g, &batch.s, &batch.goal, a)?;
    let q2 = critics[1].forward(g, &batch.s, &batch.goal, a)?;
    let q = g.min(q1, q2)?;
    let w = g.scale(lp, coef);
    let d = g.sub(w, q)?;
    let loss = g.mean(d);
    let mlp = g.mean(lp);
    Ok((loss, g.scalar(mlp)))
}

#[derive(Clone, Debug)]
pub struct FlatBundle {
    pub actor: FlatActor,
    pub critics: [Critic; 2],
    pub targets: [Critic; 2],
    pub log_entropy_coef: f64,
}

impl FlatBundle {
    pub fn new<R: Rng>(shape: &CriticShape, rng: &mut R) -> Self {
        let actor = FlatActor::new(shape, rng);
        let critics = [Critic::new(shape, ACT_DIM, rng), Critic::new(shape, ACT_DIM, rng)];
        let mut targets = critics.clone();
        for t in &mut targets {
            t.store.set_trainable(false);
        }
        Self { actor, critics, targets, log_entropy_coef: 0.0 }
    }

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

    pub fn load(path: &Path, shape: &CriticShape) -> Result<Self, NumError> {
        let mut b = Self::new(shape, &mut ChaCha8Rng::seed_from_u64(0));
        b.load_blocks(&checkpoint::load(path)?)?;
        Ok(b)
    }
}

#[derive(Clone, Debug)]
pub struct FlatCqlConfig {
    pub steps: usize,
    pub seed: u64,
    pub target_entropy: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub checkpoint_every: usize,
    pub guard_window: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for FlatCqlConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            seed: 0,
            target_entropy: -(ACT_DIM as f64),
            temperature_start: 1.0,
            temperature_end: 0.5,
            checkpoint_every: 1000,
            guard_window: 500,
            out_dir: None,
        }
    }
}

fn write_log(path: &Path, rows: &[HrlLogRow]) -> Result<(), HrlError> {
    let mut text = String::from(FLAT_LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str("cql-her,");
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| HrlError::Io(format!("{}: {e}", path.display())))
}

/// Train the flat baseline with the same critic topology, discount, target
/// updates and entropy tuning as the hierarchical learner.
pub fn train_flat_cql(
    ds: &Dataset,
    hp: &CqlHyperParams,
    goals: &GoalSamplerConfig,
    cfg: &FlatCqlConfig,
) -> Result<(FlatBundle, Vec<HrlLogRow>), HrlError> {
    hp.validate().map_err(HrlError::Config)?;
    goals.validate().map_err(HrlError::Config)?;
    if goals.k != 2 {
        return Err(HrlError::Config(format!("flat transitions are single-step (k = 2), got k = {}", goals.k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let index = ProprioIndex::build(ds);
    let mut b = FlatBundle::new(&hp.critic, &mut rng);
    let mut critic_opt =
        [AdamState::new(&b.critics[0].store, hp.critic_lr), AdamState::new(&b.critics[1].store, hp.critic_lr)];
    let mut actor_opt = AdamState::new(&b.actor.store, hp.actor_lr);
    let mut tuner = EntropyTuner::new(hp.initial_entropy_coef, cfg.target_entropy, hp.entropy_lr);
    let mut guard = GuardState::new(cfg.guard_window);
    let mut rows = Vec::with_capacity(cfg.steps);
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| HrlError::Io(format!("{}: {e}", dir.display())))?;
    }

    for step in 0..cfg.steps {
        let items = build_flat_transitions(ds, &index, goals, hp.batch, &mut rng);
        let batch = FlatTransition::batch(&items);
        let noise = FlatCqlNoise::sample(&mut rng, hp.batch, hp.n_samples);
        let tau = temperature_at(step, cfg.steps, cfg.temperature_start, cfg.temperature_end);

        let mut g = Graph::new();
        let (closs, cparts) = flat_critic_loss(
            &mut g,
            &batch,
            [&b.critics[0], &b.critics[1]],
            [&b.targets[0], &b.targets[1]],
            &b.actor,
            hp,
            &noise,
        )?;
        if !cparts.total.is_finite() {
            let summary = items.iter().map(|t| format!("r={}", t.reward)).collect::<Vec<_>>().join(" ");
            return Err(HrlError::NonFinite { what: "flat critic loss".into(), step, batch: summary });
        }
        let grads = g.backward(closs)?;
        for (opt, c) in critic_opt.iter_mut().zip(b.critics.iter_mut()) {
            opt.step(&mut c.store, &grads)?;
        }

        let coef = tuner.coef();
        let an = FlatNoise::sample(&mut rng, hp.batch);
        let mut g = Graph::new();
        let (aloss, mean_logp) =
            flat_actor_loss(&mut g, &batch, [&b.critics[0], &b.critics[1]], &b.actor, coef, &an, tau)?;
        let actor_loss = g.scalar(aloss);
        if !actor_loss.is_finite() {
            return Err(HrlError::NonFinite { what: "flat actor loss".into(), step, batch: String::new() });
        }
        let grads = g.backward(aloss)?;
        actor_opt.step(&mut b.actor.store, &grads)?;
        tuner.update(mean_logp)?;

        let [t0, t1] = &mut b.targets;
        soft_update(&[&b.critics[0], &b.critics[1]], &mut [t0, t1], hp.tau)?;

        rows.push(HrlLogRow {
            step,
            critic_loss: cparts.total,
            actor_loss,
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
                b.save(&dir.join(format!("flat_step_{:06}.ckpt", step + 1)))?;
                write_log(&dir.join("flat_log.csv"), &rows)?;
            }
        }
    }
    b.log_entropy_coef = tuner.log_coef();
    if let Some(dir) = &cfg.out_dir {
        b.save(&dir.join("flat.ckpt"))?;
    }
    Ok((b, rows))
}

/// Evaluation wrapper around the deterministic flat actor.
#[derive(Clone, Debug)]
pub struct FlatCqlPolicy {
    pub actor: FlatActor,
}

impl Policy for FlatCqlPolicy {
    fn method(&self) -> &str {
        "cql-her"
    }

    fn reset(&mut self, _rows: usize) {}

    fn restart(&mut self, _rows: &[usize]) {}

    fn act(
        &mut self,
        obs: &[Observation],
        goals: &[Observation],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EnvAction>, NumError> {
        self.actor.mean_actions(obs, goals)
    }
}
