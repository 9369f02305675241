use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};

use super::{action_from_targets, obs_features, LmpHyperParams};
use crate::datastore::WINDOW_LEN;
use crate::env::{EnvAction, Observation, OBS_DIM};
use crate::numcore::dist::{logistic_mixture_mode, logistic_mixture_sample, GaussianVars};
use crate::numcore::nn::{Activation, AttentionBlock, LayerNorm, Linear, Mlp, RecurrentCell};
use crate::numcore::{checkpoint, GaussianParams, Graph, NumError, ParamId, ParamStore, Tensor, Var};

/// Two-layer feed-forward map from a normalised observation to the embedding width.
#[derive(Clone, Debug)]
pub struct StateEmbedder(Mlp);

impl StateEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self(Mlp::new(store, name, &[OBS_DIM, width, width], Activation::Relu, Activation::Relu, rng))
    }

    /// `feats` is a flat `(rows, OBS_DIM)` buffer of normalised observations.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Vec<f64>) -> Result<Var, NumError> {
        let rows = feats.len() / OBS_DIM;
        let x = g.constant_matrix(rows, OBS_DIM, feats);
        self.0.forward(g, store, x)
    }
}

/// Transformer encoder over a padded window, pooled over real steps.
#[derive(Clone, Debug)]
pub struct PlanEncoder {
    pub store: ParamStore,
    embed: StateEmbedder,
    input: Linear,
    pos: ParamId,
    blocks: Vec<AttentionBlock>,
    norm: LayerNorm,
    head: Linear,
    latent: usize,
}

impl PlanEncoder {
    pub fn new<R: Rng>(hp: &LmpHyperParams, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let w = hp.model_width;
        let embed = StateEmbedder::new(&mut store, "embed", hp.embed_dim, rng);
        let input = Linear::new(&mut store, "input", hp.embed_dim, w, rng);
        let pos = store.add_uniform("pos", WINDOW_LEN, w, w, rng);
        let blocks = (0..hp.blocks)
            .map(|i| AttentionBlock::new(&mut store, &format!("block{i}"), w, hp.heads, hp.ff_width, rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "norm", w);
        let head = Linear::new(&mut store, "head", w, 2 * hp.latent_dim, rng);
        Self { store, embed, input, pos, blocks, norm, head, latent: hp.latent_dim }
    }

    /// `obs` holds `batch` windows of `WINDOW_LEN` raw observation rows each;
    /// `mask` marks real steps. Padded steps never reach the output.
    pub fn forward(&self, g: &mut Graph, obs: &[f64], mask: &[bool], batch: usize) -> Result<GaussianVars, NumError> {
        let seq = WINDOW_LEN;
        if obs.len() != batch * seq * OBS_DIM || mask.len() != batch * seq {
            return Err(NumError::Shape(format!(
                "encoder: {} values / {} mask for batch {batch}",
                obs.len(),
                mask.len()
            )));
        }
        let s = &self.store;
        let e = self.embed.forward(g, s, obs_features(obs))?;
        let x = self.input.forward(g, s, e)?;
        let pos = g.param(s, self.pos);
        let idx: Vec<usize> = (0..batch * seq).map(|r| r % seq).collect();
        let pos = g.gather_rows(pos, &idx)?;
        let mut h = g.add(x, pos)?;
        for b in &self.blocks {
            h = b.forward(g, s, h, mask, batch, seq)?;
        }
        let h = self.norm.forward(g, s, h)?;
        let mut pool = vec![0.0; batch * batch * seq];
        for b in 0..batch {
            let m = &mask[b * seq..(b + 1) * seq];
            let n = m.iter().filter(|v| **v).count() as f64;
            for (j, &real) in m.iter().enumerate() {
                if real {
                    pool[b * batch * seq + b * seq + j] = 1.0 / n;
                }
            }
        }
        let pool = g.constant_matrix(batch, batch * seq, pool);
        let pooled = g.matmul(pool, h)?;
        let out = self.head.forward(g, s, pooled)?;
        GaussianVars::from_head(g, out, self.latent)
    }
}

/// Feed-forward prior over plans given current and goal observations. The
/// high-level actor shares this topology.
#[derive(Clone, Debug)]
pub struct PlanPrior {
    pub store: ParamStore,
    embed_s: StateEmbedder,
    embed_g: StateEmbedder,
    mlp: Mlp,
    latent: usize,
}

impl PlanPrior {
    pub fn new<R: Rng>(hp: &LmpHyperParams, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed_s = StateEmbedder::new(&mut store, "embed_s", hp.embed_dim, rng);
        let embed_g = StateEmbedder::new(&mut store, "embed_g", hp.embed_dim, rng);
        let mut sizes = vec![2 * hp.embed_dim];
        sizes.extend(std::iter::repeat_n(hp.prior_width, hp.prior_layers));
        sizes.push(2 * hp.latent_dim);
        let mlp = Mlp::new(&mut store, "mlp", &sizes, Activation::Relu, Activation::None, rng);
        Self { store, embed_s, embed_g, mlp, latent: hp.latent_dim }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    /// Raw observation rows for current and goal states, `(rows, OBS_DIM)` each.
    pub fn forward(&self, g: &mut Graph, cur: &[f64], goal: &[f64]) -> Result<GaussianVars, NumError> {
        let s = &self.store;
        let a = self.embed_s.forward(g, s, obs_features(cur))?;
        let b = self.embed_g.forward(g, s, obs_features(goal))?;
        let x = g.concat_cols(&[a, b])?;
        let out = self.mlp.forward(g, s, x)?;
        GaussianVars::from_head(g, out, self.latent)
    }

    pub fn distribution(&self, cur: &[Observation], goal: &[Observation]) -> Result<Vec<GaussianParams>, NumError> {
        let mut g = Graph::new();
        let c: Vec<f64> = cur.iter().flat_map(|o| o.0).collect();
        let t: Vec<f64> = goal.iter().flat_map(|o| o.0).collect();
        let d = self.forward(&mut g, &c, &t)?;
        Ok((0..cur.len()).map(|r| d.row(&g, r)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Centre of the most probable bin; gripper by the sign of its logit.
    Greedy,
    Stochastic,
}

/// Recurrent state of the decoder for a batch of rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHidden {
    pub layers: Vec<Tensor>,
}

impl DecoderHidden {
    pub fn zeros(layers: usize, rows: usize, hidden: usize) -> Self {
        Self { layers: vec![Tensor::zeros(&[rows, hidden]); layers] }
    }

    pub fn rows(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    /// Zero the state of the given rows (plan boundaries).
    pub fn reset_rows(&mut self, rows: &[usize]) {
        for t in &mut self.layers {
            let h = t.cols();
            for &r in rows {
                t.data_mut()[r * h..(r + 1) * h].fill(0.0);
            }
        }
    }
}

/// Stacked recurrent decoder with a logistic-mixture head for the deltas
/// and a Bernoulli logit for the gripper.
#[derive(Clone, Debug)]
pub struct PlanDecoder {
    pub store: ParamStore,
    embed: StateEmbedder,
    cells: Vec<RecurrentCell>,
    head: Linear,
    hidden: usize,
    components: usize,
    bins: usize,
}

impl PlanDecoder {
    pub fn new<R: Rng>(hp: &LmpHyperParams, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed = StateEmbedder::new(&mut store, "embed", hp.embed_dim, rng);
        let mut cells = Vec::with_capacity(hp.decoder_layers);
        let mut inputs = hp.embed_dim + hp.latent_dim;
        for i in 0..hp.decoder_layers {
            cells.push(RecurrentCell::new(&mut store, &format!("rnn{i}"), hp.cell, inputs, hp.decoder_hidden, rng));
            inputs = hp.decoder_hidden;
        }
        let head = Linear::new(&mut store, "head", hp.decoder_hidden, hp.head_width(), rng);
        head.scale_weights(&mut store, 0.1);
        Self { store, embed, cells, head, hidden: hp.decoder_hidden, components: hp.components, bins: hp.bins }
    }

    pub fn layers(&self) -> usize {
        self.cells.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn initial_hidden(&self, rows: usize) -> DecoderHidden {
        DecoderHidden::zeros(self.cells.len(), rows, self.hidden)
    }

    /// One decoder step for `rows` inputs. `obs` is `(rows, OBS_DIM)` raw,
    /// `z` is a `(rows, latent)` plan. Returns the head `(rows, head_width)`
    /// and the new hidden state of every layer.
    pub fn step(&self, g: &mut Graph, obs: &[f64], z: Var, hidden: &[Var]) -> Result<(Var, Vec<Var>), NumError> {
        let e = self.embed.forward(g, &self.store, obs_features(obs))?;
        self.step_embedded(g, e, z, hidden)
    }

    fn step_embedded(&self, g: &mut Graph, e: Var, z: Var, hidden: &[Var]) -> Result<(Var, Vec<Var>), NumError> {
        let mut x = g.concat_cols(&[e, z])?;
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, &h) in self.cells.iter().zip(hidden) {
            x = cell.step(g, &self.store, x, h)?;
            next.push(x);
        }
        let out = self.head.forward(g, &self.store, x)?;
        Ok((out, next))
    }

    /// Decode a whole window with one plan per row of `z`. `obs` is laid out
    /// time-major: row `t * batch + b`. Returns the head `(seq * batch, head_width)`
    /// in the same order.
    pub fn forward_window(
        &self,
        g: &mut Graph,
        obs: &[f64],
        z: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var, NumError> {
        let e = self.embed.forward(g, &self.store, obs_features(obs))?;
        let mut hidden: Vec<Var> =
            (0..self.cells.len()).map(|_| g.constant(Tensor::zeros(&[batch, self.hidden]))).collect();
        let mut outs = Vec::with_capacity(seq);
        for t in 0..seq {
            let et = g.slice_rows(e, t * batch, (t + 1) * batch)?;
            let (out, h) = self.step_embedded(g, et, z, &hidden)?;
            outs.push(out);
            hidden = h;
        }
        g.concat_rows(&outs)
    }

    /// Choose actions from head values, one row per rollout.
    pub fn actions_from_head<R: Rng>(&self, head: &Tensor, mode: DecodeMode, rng: &mut R) -> Vec<EnvAction> {
        let w = 3 * self.components;
        (0..head.rows())
            .map(|r| {
                let row = head.row_slice(r);
                let mut d = [0.0; 2];
                for (i, di) in d.iter_mut().enumerate() {
                    let packed = &row[i * w..(i + 1) * w];
                    *di = match mode {
                        DecodeMode::Greedy => logistic_mixture_mode(packed, self.components, self.bins),
                        DecodeMode::Stochastic => logistic_mixture_sample(packed, self.components, rng),
                    };
                }
                let logit = row[2 * w];
                let closed = match mode {
                    DecodeMode::Greedy => logit > 0.0,
                    DecodeMode::Stochastic => rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp()),
                };
                action_from_targets(d, closed)
            })
            .collect()
    }

    /// Inference step for a batch of rollouts; updates `hidden` in place.
    pub fn act<R: Rng>(
        &self,
        obs: &[Observation],
        z: &[Vec<f64>],
        hidden: &mut DecoderHidden,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<Vec<EnvAction>, NumError> {
        let rows = obs.len();
        let mut g = Graph::new();
        let flat: Vec<f64> = obs.iter().flat_map(|o| o.0).collect();
        let latent = z.first().map_or(0, Vec::len);
        let zv = g.constant_matrix(rows, latent, z.concat());
        let h: Vec<Var> = hidden.layers.iter().map(|t| g.constant(t.clone())).collect();
        let (out, next) = self.step(&mut g, &flat, zv, &h)?;
        for (dst, v) in hidden.layers.iter_mut().zip(next) {
            *dst = g.value(v).clone();
        }
        Ok(self.actions_from_head(g.value(out), mode, rng))
    }
}

/// Trained latent-plan model: encoder, prior and decoder.
#[derive(Clone, Debug)]
pub struct LmpBundle {
    pub hp: LmpHyperParams,
    pub encoder: PlanEncoder,
    pub prior: PlanPrior,
    pub decoder: PlanDecoder,
}

impl LmpBundle {
    pub fn new<R: Rng>(hp: &LmpHyperParams, rng: &mut R) -> Self {
        let encoder = PlanEncoder::new(hp, rng);
        let prior = PlanPrior::new(hp, rng);
        let decoder = PlanDecoder::new(hp, rng);
        Self { hp: hp.clone(), encoder, prior, decoder }
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.encoder.store, &self.prior.store, &self.decoder.store]
    }

    pub fn blocks(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, store) in
            [("encoder.", &self.encoder.store), ("prior.", &self.prior.store), ("decoder.", &self.decoder.store)]
        {
            out.extend(store.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        out
    }

    pub fn load_blocks(&mut self, blocks: &HashMap<String, Tensor>) -> Result<(), NumError> {
        self.encoder.store.load_named(blocks, "encoder.")?;
        self.prior.store.load_named(blocks, "prior.")?;
        self.decoder.store.load_named(blocks, "decoder.")
    }

    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        checkpoint::save(path, &self.blocks())
    }

    /// Build the architecture for `hp` and fill it from a checkpoint.
    pub fn load(path: &Path, hp: &LmpHyperParams) -> Result<Self, NumError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut b = Self::new(hp, &mut rng);
        b.load_blocks(&checkpoint::load(path)?)?;
        Ok(b)
    }

    /// Freeze every parameter, as required before high-level training.
    pub fn freeze(&mut self) {
        self.encoder.store.set_trainable(false);
        self.prior.store.set_trainable(false);
        self.decoder.store.set_trainable(false);
    }
}
