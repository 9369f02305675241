use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::critic::{conservative_critic_loss, Candidates, Critic, CriticLossParts, TransitionBatch};
use super::train::TransitionPool;
use super::{CqlHyperParams, HrlError};
use crate::datastore::{Dataset, Window};
use crate::env::{Observation, OBS_DIM};
use crate::lmp::{PlanEncoder, PlanPrior};
use crate::numcore::dist::{log_tanh_jacobian, tanh_gaussian_logprob_var, tanh_gaussian_rsample, HALF_LN_2PI};
use crate::numcore::{AdamState, Graph, NumError, ParamId, ParamStore, Tensor, Var};

/// Plans for a batch of windows: `tanh(μ + σ ε)` under the encoder, one row of
/// `noise` per window, each with its log-density under the posterior.
pub fn encode_windows(
    encoder: &PlanEncoder,
    windows: &[Window],
    noise: &[f64],
) -> Result<Vec<(Vec<f64>, f64)>, NumError> {
    let mut g = Graph::new();
    let obs: Vec<f64> = windows.iter().flat_map(|w| w.observations.iter().copied()).collect();
    let mask: Vec<bool> = windows.iter().flat_map(|w| w.mask).collect();
    let q = encoder.forward(&mut g, &obs, &mask, windows.len())?;
    let (mean, ls) = (g.value(q.mean), g.value(q.log_std));
    let dim = mean.cols();
    Ok((0..windows.len())
        .map(|r| {
            let mut lp = 0.0;
            let z = (0..dim)
                .map(|j| {
                    let e = noise[r * dim + j];
                    let pre = mean.get(r, j) + ls.get(r, j).exp() * e;
                    lp += -0.5 * e * e - ls.get(r, j) - HALF_LN_2PI - log_tanh_jacobian(pre);
                    pre.tanh()
                })
                .collect();
            (z, lp)
        })
        .collect())
}

/// `(s_t, z_t, s_{t+k-1})` for one window: the first and last real
/// observations and a plan sampled from the frozen encoder.
pub fn build_transition(
    window: &Window,
    encoder: &PlanEncoder,
    noise: &[f64],
) -> Result<(Observation, Vec<f64>, Observation), NumError> {
    let z = encode_windows(encoder, std::slice::from_ref(window), noise)?.remove(0).0;
    Ok((window.first(), z, window.last()))
}

/// Uniform draws on `(-1, 1)^dim` with their log-density `-dim · ln 2`.
pub fn uniform_candidates(actions: Vec<f64>, dim: usize) -> Candidates {
    let rows = actions.len() / dim;
    Candidates { actions, log_density: vec![-(dim as f64) * std::f64::consts::LN_2; rows] }
}

/// Tanh-Gaussian actor samples with their log-densities, no gradients.
pub fn actor_candidates(actor: &PlanPrior, s: &[f64], goal: &[f64], noise: Vec<f64>) -> Result<Candidates, NumError> {
    let mut g = Graph::new();
    let dist = actor.forward(&mut g, s, goal)?;
    let (z, lp) = tanh_gaussian_rsample(&mut g, dist, noise)?;
    Ok(Candidates { actions: g.value(z).data().to_vec(), log_density: g.value(lp).data().to_vec() })
}

/// Pre-drawn randomness for one critic update.
#[derive(Clone, Debug, PartialEq)]
pub struct CqlNoise {
    /// Standard normal draws for the bootstrap action at `s_next`.
    pub target: Vec<f64>,
    /// `n` sets of uniform draws on (-1, 1).
    pub uniform: Vec<Vec<f64>>,
    /// `n` sets of standard normal draws for policy samples at `s_t`.
    pub policy: Vec<Vec<f64>>,
}

impl CqlNoise {
    pub fn sample<R: Rng>(rng: &mut R, rows: usize, n: usize, dim: usize) -> Self {
        let normal = |rng: &mut R| (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
        let target = normal(rng);
        let uniform = (0..n).map(|_| (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let policy = (0..n).map(|_| normal(rng)).collect();
        Self { target, uniform, policy }
    }
}

/// `r + (1 - r) γ min(Q̄₁, Q̄₂)(s_next, a', s_g)` for the given next actions.
/// Rewarded rows are terminal, so their target is exactly 1. With `clip`
/// the bootstrap is held to the attainable return range `[0, 1]`.
pub fn bootstrap_targets(
    batch: &TransitionBatch,
    targets: [&Critic; 2],
    next_actions: &[f64],
    gamma: f64,
    clip: bool,
) -> Result<Vec<f64>, NumError> {
    let q1 = targets[0].values(&batch.s_next, &batch.goal, next_actions)?;
    let q2 = targets[1].values(&batch.s_next, &batch.goal, next_actions)?;
    Ok(batch
        .reward
        .iter()
        .zip(q1.iter().zip(&q2))
        .map(|(&r, (a, b))| {
            if r == 1.0 {
                1.0
            } else if clip {
                (r + gamma * a.min(*b)).clamp(0.0, 1.0)
            } else {
                r + gamma * a.min(*b)
            }
        })
        .collect())
}

/// Deterministic backup with `z'` drawn from the actor at `(s_next, s_g)`.
pub fn bellman_target(
    batch: &TransitionBatch,
    targets: [&Critic; 2],
    actor: &PlanPrior,
    hp: &CqlHyperParams,
    noise: Vec<f64>,
) -> Result<Vec<f64>, NumError> {
    let next = actor_candidates(actor, &batch.s_next, &batch.goal, noise)?;
    bootstrap_targets(batch, targets, &next.actions, hp.gamma, hp.clip_targets)
}

/// Conservative critic objective for latent-plan transitions: the
/// candidate set is `n` uniform plans, `n` actor plans and the dataset plan,
/// each corrected by the density it was drawn from.
pub fn cql_critic_loss(
    g: &mut Graph,
    batch: &TransitionBatch,
    critics: [&Critic; 2],
    targets: [&Critic; 2],
    actor: &PlanPrior,
    hp: &CqlHyperParams,
    noise: &CqlNoise,
) -> Result<(Var, CriticLossParts), NumError> {
    let dim = batch.action_dim;
    let y = bellman_target(batch, targets, actor, hp, noise.target.clone())?;
    let mut ood: Vec<Candidates> = noise.uniform.iter().map(|u| uniform_candidates(u.clone(), dim)).collect();
    for p in &noise.policy {
        ood.push(actor_candidates(actor, &batch.s, &batch.goal, p.clone())?);
    }
    conservative_critic_loss(g, critics, batch, &y, &ood, hp.cql_alpha)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorLossParts {
    pub loss: f64,
    pub mean_logp: f64,
    pub mean_q: f64,
}

/// `mean(coef · log π(z|s, s_g) - min(Q₁, Q₂)(s, z, s_g))` with a
/// reparameterised `z`.
pub fn cql_actor_loss(
    g: &mut Graph,
    batch: &TransitionBatch,
    critics: [&Critic; 2],
    actor: &PlanPrior,
    entropy_coef: f64,
    noise: Vec<f64>,
) -> Result<(Var, ActorLossParts), NumError> {
    let dist = actor.forward(g, &batch.s, &batch.goal)?;
    let (z, lp) = tanh_gaussian_rsample(g, dist, noise)?;
    let q1 = critics[0].forward(g, &batch.s, &batch.goal, z)?;
    let q2 = critics[1].forward(g, &batch.s, &batch.goal, z)?;
    let q = g.min(q1, q2)?;
    let weighted = g.scale(lp, entropy_coef);
    let per_row = g.sub(weighted, q)?;
    let loss = g.mean(per_row);
    let mlp = g.mean(lp);
    let mq = g.mean(q);
    let parts = ActorLossParts { loss: g.scalar(loss), mean_logp: g.scalar(mlp), mean_q: g.scalar(mq) };
    Ok((loss, parts))
}

/// Automatic entropy tuning on `log α`: descending
/// `-log α · (log π + target)` raises α while the policy entropy is below
/// the target and lowers it otherwise.
#[derive(Clone, Debug)]
pub struct EntropyTuner {
    pub store: ParamStore,
    id: ParamId,
    adam: AdamState,
    pub target: f64,
}

impl EntropyTuner {
    pub fn new(initial_coef: f64, target: f64, lr: f64) -> Self {
        let mut store = ParamStore::new();
        let id = store.add("log_alpha", Tensor::scalar(initial_coef.ln()));
        let adam = AdamState::new(&store, lr);
        Self { store, id, adam, target }
    }

    pub fn coef(&self) -> f64 {
        self.store.get(self.id).item().exp()
    }

    pub fn log_coef(&self) -> f64 {
        self.store.get(self.id).item()
    }

    pub fn set_log_coef(&mut self, v: f64) {
        self.store.get_mut(self.id).data_mut()[0] = v;
    }

    pub fn update(&mut self, mean_logp: f64) -> Result<f64, NumError> {
        let mut g = Graph::new();
        let la = g.param(&self.store, self.id);
        let loss = g.scale(la, -(mean_logp + self.target));
        let grads = g.backward(loss)?;
        self.adam.step(&mut self.store, &grads)?;
        Ok(self.coef())
    }
}

/// Negative tanh-Gaussian log-likelihood of fixed plans under the actor.
pub fn bc_loss(g: &mut Graph, actor: &PlanPrior, s: &[f64], goal: &[f64], z: &[f64]) -> Result<Var, NumError> {
    let dist = actor.forward(g, s, goal)?;
    let lp = tanh_gaussian_logprob_var(g, dist, z)?;
    let m = g.mean(lp);
    Ok(g.neg(m))
}

/// Behaviour cloning of encoder plans before conservative training. Each
/// epoch visits the pool once in shuffled minibatches, conditioning on the
/// window end as goal. Returns the mean loss of every epoch.
pub fn bc_warmstart<R: Rng>(
    actor: &mut PlanPrior,
    pool: &TransitionPool,
    ds: &Dataset,
    hp: &CqlHyperParams,
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<f64>, HrlError> {
    let mut adam = AdamState::new(&actor.store, hp.actor_lr);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut means = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(hp.batch) {
            let mut s = Vec::with_capacity(chunk.len() * OBS_DIM);
            let mut goal = Vec::with_capacity(chunk.len() * OBS_DIM);
            let mut z = Vec::new();
            for &i in chunk {
                let e = &pool.entries[i];
                s.extend_from_slice(&ds.episode(e.episode).observation(e.t).0);
                goal.extend_from_slice(&ds.episode(e.episode).observation(e.t + pool.stride).0);
                z.extend_from_slice(&e.z);
            }
            let mut g = Graph::new();
            let loss = bc_loss(&mut g, actor, &s, &goal, &z)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(HrlError::NonFinite { what: "bc loss".into(), step: n, batch: format!("{chunk:?}") });
            }
            let grads = g.backward(loss)?;
            adam.step(&mut actor.store, &grads)?;
            sum += v;
            n += 1;
        }
        means.push(sum / n.max(1) as f64);
    }
    Ok(means)
}
