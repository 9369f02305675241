//! Goal-conditioned Q-networks and the conservative critic objective shared
//! by the hierarchical and flat learners.

use rand::Rng;

use crate::env::OBS_DIM;
use crate::lmp::StateEmbedder;
use crate::numcore::nn::{Activation, Mlp};
use crate::numcore::{Graph, NumError, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticShape {
    pub embed_dim: usize,
    pub width: usize,
    pub layers: usize,
}

impl Default for CriticShape {
    fn default() -> Self {
        Self { embed_dim: 32, width: 64, layers: 3 }
    }
}

/// `Q(s, s_g, a)`: separate state and goal embedders, concatenated with the
/// action and mapped to a scalar.
#[derive(Clone, Debug)]
pub struct Critic {
    pub store: ParamStore,
    embed_s: StateEmbedder,
    embed_g: StateEmbedder,
    mlp: Mlp,
    pub action_dim: usize,
}

impl Critic {
    pub fn new<R: Rng>(shape: &CriticShape, action_dim: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed_s = StateEmbedder::new(&mut store, "embed_s", shape.embed_dim, rng);
        let embed_g = StateEmbedder::new(&mut store, "embed_g", shape.embed_dim, rng);
        let mut sizes = vec![2 * shape.embed_dim + action_dim];
        sizes.extend(std::iter::repeat_n(shape.width, shape.layers));
        sizes.push(1);
        let mlp = Mlp::new(&mut store, "mlp", &sizes, Activation::Relu, Activation::None, rng);
        Self { store, embed_s, embed_g, mlp, action_dim }
    }

    /// Raw observation rows for state and goal; `a` is `(rows, action_dim)`.
    pub fn forward(&self, g: &mut Graph, s: &[f64], goal: &[f64], a: Var) -> Result<Var, NumError> {
        let es = self.embed_s.forward(g, &self.store, crate::lmp::obs_features(s))?;
        let eg = self.embed_g.forward(g, &self.store, crate::lmp::obs_features(goal))?;
        let x = g.concat_cols(&[es, eg, a])?;
        self.mlp.forward(g, &self.store, x)
    }

    /// Q-values without building gradients, one per row.
    pub fn values(&self, s: &[f64], goal: &[f64], a: &[f64]) -> Result<Vec<f64>, NumError> {
        let mut g = Graph::new();
        let rows = s.len() / OBS_DIM;
        let av = g.constant_matrix(rows, self.action_dim, a.to_vec());
        let q = self.forward(&mut g, s, goal, av)?;
        Ok(g.value(q).data().to_vec())
    }
}

/// `target <- (1 - rate) * target + rate * online`.
pub fn soft_update(online: &[&Critic], targets: &mut [&mut Critic], rate: f64) -> Result<(), NumError> {
    for (t, o) in targets.iter_mut().zip(online) {
        t.store.soft_update_from(&o.store, rate)?;
    }
    Ok(())
}

/// Flat buffers for a batch of goal-conditioned transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub rows: usize,
    pub action_dim: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Log-density of each dataset action under the distribution that
    /// produced it; zero when unknown.
    pub a_log_density: Vec<f64>,
    pub s_next: Vec<f64>,
    pub goal: Vec<f64>,
    pub reward: Vec<f64>,
}

/// Candidate actions for the logsumexp: `(rows, action_dim)` actions with
/// the per-row log-density of the distribution they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub actions: Vec<f64>,
    pub log_density: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticLossParts {
    pub total: f64,
    pub bellman: [f64; 2],
    pub conservative: [f64; 2],
    /// logsumexp over candidates minus dataset Q, averaged over both critics.
    pub cons_gap: f64,
    /// Mean dataset Q over both critics.
    pub mean_q: f64,
}

fn tile(v: &[f64], times: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * times);
    for _ in 0..times {
        out.extend_from_slice(v);
    }
    out
}

/// Sum over both critics of
/// `mean (Q(s, a) - y)^2 + α · (mean logsumexp_j [Q(s, a_j) - log μ_j(a_j)] - mean Q(s, a))`,
/// where the candidate set is every entry of `ood` plus the dataset action
/// (corrected by `batch.a_log_density`).
pub fn conservative_critic_loss(
    g: &mut Graph,
    critics: [&Critic; 2],
    batch: &TransitionBatch,
    y: &[f64],
    ood: &[Candidates],
    cql_alpha: f64,
) -> Result<(Var, CriticLossParts), NumError> {
    let b = batch.rows;
    let ad = batch.action_dim;
    let sets = 1 + ood.len();
    let mut actions = batch.a.clone();
    let mut corr = vec![0.0; b * sets];
    for r in 0..b {
        corr[r * sets] = -batch.a_log_density[r];
    }
    for (j, c) in ood.iter().enumerate() {
        if c.actions.len() != b * ad || c.log_density.len() != b {
            return Err(NumError::Shape(format!("candidate set {j} does not match batch of {b}")));
        }
        actions.extend_from_slice(&c.actions);
        for r in 0..b {
            corr[r * sets + 1 + j] = -c.log_density[r];
        }
    }
    let s_all = tile(&batch.s, sets);
    let g_all = tile(&batch.goal, sets);
    let a_all = g.constant_matrix(b * sets, ad, actions);
    let y = g.constant_matrix(b, 1, y.to_vec());
    let corr = g.constant_matrix(b, sets, corr);
    let mut parts = CriticLossParts::default();
    let mut losses = Vec::with_capacity(2);
    for (i, c) in critics.iter().enumerate() {
        let q = c.forward(g, &s_all, &g_all, a_all)?;
        let q_data = g.slice_rows(q, 0, b)?;
        let diff = g.sub(q_data, y)?;
        let sq = g.square(diff);
        let mse = g.mean(sq);
        let blocks: Vec<Var> = (0..sets).map(|j| g.slice_rows(q, j * b, (j + 1) * b)).collect::<Result<_, _>>()?;
        let mat = g.concat_cols(&blocks)?;
        let mat = g.add(mat, corr)?;
        let lse = g.logsumexp_cols(mat);
        let lse = g.mean(lse);
        let qm = g.mean(q_data);
        let gap = g.sub(lse, qm)?;
        let cons = g.scale(gap, cql_alpha);
        losses.push(g.add(mse, cons)?);
        parts.bellman[i] = g.scalar(mse);
        parts.conservative[i] = g.scalar(gap);
        parts.cons_gap += 0.5 * g.scalar(gap);
        parts.mean_q += 0.5 * g.scalar(qm);
    }
    let total = g.add(losses[0], losses[1])?;
    parts.total = g.scalar(total);
    Ok((total, parts))
}
