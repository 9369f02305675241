//! Plain-loop re-implementations of the networks and losses. Nothing here
//! touches `Graph`; parameters are read by name from the stores.

use taco_rl::env::OBS_DIM;
use taco_rl::lmp::LmpHyperParams;
use taco_rl::numcore::nn::CellKind;
use taco_rl::numcore::ParamStore;

pub type Mat = Vec<Vec<f64>>;

const LN_EPS: f64 = 1e-5;
const STD_LO: f64 = -20.0;
const STD_HI: f64 = 2.0;
const SCALE_LO: f64 = -7.0;

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data()
}

pub fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let b = param(store, &format!("{name}.b"));
    let w = param(store, &format!("{name}.w"));
    let outs = b.len();
    x.iter()
        .map(|row| {
            (0..outs)
                .map(|j| {
                    let mut s = b[j];
                    for (k, xk) in row.iter().enumerate() {
                        s += xk * w[k * outs + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn relu(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect()).collect()
}

fn tanh(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Stack `name.0`, `name.1`, ... with ReLU between layers.
pub fn mlp(store: &ParamStore, name: &str, x: &Mat, relu_out: bool) -> Mat {
    let mut n = 0;
    while store.find(&format!("{name}.{n}.w")).is_some() {
        n += 1;
    }
    let mut h = x.clone();
    for i in 0..n {
        h = linear(store, &format!("{name}.{i}"), &h);
        if i + 1 < n || relu_out {
            h = relu(h);
        }
    }
    h
}

fn layer_norm(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let gain = param(store, &format!("{name}.gain"));
    let bias = param(store, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mu) / (var + LN_EPS).sqrt() * gain[j] + bias[j]).collect()
        })
        .collect()
}

/// Positions and scene values rescaled from [0, 1] to [-1, 1]; the gripper
/// coordinate is left alone.
pub fn features(obs: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(obs.len());
    for (i, v) in obs.iter().enumerate() {
        f.push(if i % OBS_DIM == 2 { *v } else { v * 2.0 - 1.0 });
    }
    f
}

fn rows_of(flat: &[f64], cols: usize) -> Mat {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn embed(store: &ParamStore, name: &str, obs: &[f64]) -> Mat {
    mlp(store, name, &rows_of(&features(obs), OBS_DIM), true)
}

fn concat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len()).map(|r| parts.iter().flat_map(|p| p[r].iter().copied()).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn split_gaussian(head: Mat, latent: usize) -> (Mat, Mat) {
    let mean = head.iter().map(|r| r[..latent].to_vec()).collect();
    let ls = head.iter().map(|r| r[latent..].iter().map(|v| v.clamp(STD_LO, STD_HI)).collect()).collect();
    (mean, ls)
}

fn attention(q: &Mat, k: &Mat, v: &Mat, mask: &[bool], heads: usize) -> Mat {
    let seq = q.len();
    let width = q[0].len();
    let dh = width / heads;
    let mut out = vec![vec![0.0; width]; seq];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..seq {
            let scores: Vec<f64> =
                (0..seq).map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = (0..seq).filter(|&j| mask[j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
            let w: Vec<f64> = (0..seq).map(|j| if mask[j] { (scores[j] - m).exp() } else { 0.0 }).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..seq).map(|j| w[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

/// Posterior mean and clamped log-std for one padded window.
pub fn encoder(store: &ParamStore, hp: &LmpHyperParams, obs: &[f64], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let seq = mask.len();
    let w = hp.model_width;
    let e = embed(store, "embed", obs);
    let x = linear(store, "input", &e);
    let pos = rows_of(param(store, "pos"), w);
    let mut x = add(&x, &pos[..seq].to_vec());
    for b in 0..hp.blocks {
        let h = layer_norm(store, &format!("block{b}.ln1"), &x);
        let qkv = linear(store, &format!("block{b}.qkv"), &h);
        let part = |i: usize| -> Mat { qkv.iter().map(|r| r[i * w..(i + 1) * w].to_vec()).collect() };
        let a = attention(&part(0), &part(1), &part(2), mask, hp.heads);
        let a = linear(store, &format!("block{b}.proj"), &a);
        x = add(&x, &a);
        let h = layer_norm(store, &format!("block{b}.ln2"), &x);
        let f = mlp(store, &format!("block{b}.ff"), &h, false);
        x = add(&x, &f);
    }
    let x = layer_norm(store, "norm", &x);
    let real: Vec<usize> = (0..seq).filter(|&t| mask[t]).collect();
    let pooled: Vec<f64> = (0..w).map(|c| real.iter().map(|&t| x[t][c]).sum::<f64>() / real.len() as f64).collect();
    let head = linear(store, "head", &vec![pooled]);
    let (m, s) = split_gaussian(head, hp.latent_dim);
    (m[0].clone(), s[0].clone())
}

/// Gaussian over plans from current and goal observations (prior and actor share this form).
pub fn prior(store: &ParamStore, latent: usize, cur: &[f64], goal: &[f64]) -> (Mat, Mat) {
    let a = embed(store, "embed_s", cur);
    let b = embed(store, "embed_g", goal);
    let head = mlp(store, "mlp", &concat(&[&a, &b]), false);
    split_gaussian(head, latent)
}

fn cell(store: &ParamStore, name: &str, kind: CellKind, x: &[f64], h: &[f64]) -> Vec<f64> {
    let xi = linear(store, &format!("{name}.in"), &vec![x.to_vec()]).remove(0);
    let hh = linear(store, &format!("{name}.hid"), &vec![h.to_vec()]).remove(0);
    let n = h.len();
    match kind {
        CellKind::Tanh => (0..n).map(|j| (xi[j] + hh[j]).tanh()).collect(),
        CellKind::Gru => (0..n)
            .map(|j| {
                let r = sigmoid(xi[j] + hh[j]);
                let u = sigmoid(xi[n + j] + hh[n + j]);
                let c = (xi[2 * n + j] + r * hh[2 * n + j]).tanh();
                u * h[j] + (1.0 - u) * c
            })
            .collect(),
    }
}

/// Decoder head rows for one window under plan `z`, one per step.
pub fn decoder(store: &ParamStore, hp: &LmpHyperParams, obs: &[f64], z: &[f64]) -> Mat {
    let e = embed(store, "embed", obs);
    let mut hidden = vec![vec![0.0; hp.decoder_hidden]; hp.decoder_layers];
    let mut out = Vec::with_capacity(e.len());
    for et in &e {
        let mut x: Vec<f64> = et.iter().chain(z).copied().collect();
        for (l, h) in hidden.iter_mut().enumerate() {
            *h = cell(store, &format!("rnn{l}"), hp.cell, &x, h);
            x = h.clone();
        }
        out.push(linear(store, "head", &vec![x]).remove(0));
    }
    out
}

/// Log-mass of the bin holding `target` under one mixture head, from CDF differences.
pub fn mixture_logprob(packed: &[f64], k: usize, target: f64, bins: usize) -> f64 {
    let width = 2.0 / bins as f64;
    let t = target.clamp(-1.0, 1.0);
    let bin = (((t + 1.0) / width) as usize).min(bins - 1);
    let lo = -1.0 + bin as f64 * width;
    let hi = lo + width;
    let zmax = packed[..k].iter().cloned().fold(f64::MIN, f64::max);
    let norm: f64 = packed[..k].iter().map(|l| (l - zmax).exp()).sum();
    let mut mass = 0.0;
    for j in 0..k {
        let s = packed[2 * k + j].max(SCALE_LO).exp();
        let mu = packed[k + j];
        let upper = if bin + 1 == bins { 1.0 } else { sigmoid((hi - mu) / s) };
        let lower = if bin == 0 { 0.0 } else { sigmoid((lo - mu) / s) };
        mass += (packed[j] - zmax).exp() / norm * (upper - lower);
    }
    mass.ln()
}

pub fn gaussian_kl(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mq.len() {
        let (sq, sp) = (lq[i].exp(), lp[i].exp());
        kl += (sp / sq).ln() + (sq * sq + (mq[i] - mp[i]).powi(2)) / (2.0 * sp * sp) - 0.5;
    }
    kl
}

/// Log-density of `tanh(mean + std * eps)` evaluated at the drawn point.
pub fn squashed_logdensity(mean: &[f64], ls: &[f64], eps: &[f64]) -> (Vec<f64>, f64) {
    let mut z = Vec::with_capacity(mean.len());
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let x = mean[i] + ls[i].exp() * eps[i];
        let t = x.tanh();
        let normal = -0.5 * eps[i] * eps[i] - ls[i] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // 1 - tanh^2 = 4 / (e^x + e^-x)^2
        let jac = (4.0 / (x.exp() + (-x).exp()).powi(2)).ln();
        lp += normal - jac;
        z.push(t);
    }
    (z, lp)
}

pub struct LmpWindow<'a> {
    pub obs: &'a [f64],
    pub actions: &'a [f64],
    pub mask: &'a [bool],
}

/// `(total, nll, kl)` of the latent-plan objective for a batch of windows.
pub fn lmp_loss(
    enc: &ParamStore,
    pri: &ParamStore,
    dec: &ParamStore,
    hp: &LmpHyperParams,
    windows: &[LmpWindow],
    noise: &[f64],
    max_delta: f64,
) -> (f64, f64, f64) {
    let d = hp.latent_dim;
    let k = hp.components;
    let mut nll = 0.0;
    let mut kl = 0.0;
    for (b, w) in windows.iter().enumerate() {
        let (mq, lq) = encoder(enc, hp, w.obs, w.mask);
        let real = w.mask.iter().filter(|m| **m).count();
        let first = &w.obs[..OBS_DIM];
        let last = &w.obs[(real - 1) * OBS_DIM..real * OBS_DIM];
        let (mp, lp) = prior(pri, d, first, last);
        kl += gaussian_kl(&mq, &lq, &mp[0], &lp[0]);
        let z: Vec<f64> = (0..d).map(|i| (mq[i] + lq[i].exp() * noise[b * d + i]).tanh()).collect();
        let head = decoder(dec, hp, w.obs, &z);
        for (t, row) in head.iter().enumerate() {
            if !w.mask[t] {
                continue;
            }
            let a = &w.actions[t * 3..t * 3 + 3];
            let mut step = 0.0;
            for dim in 0..2 {
                let target = (a[dim] / max_delta).clamp(-1.0, 1.0);
                step -= mixture_logprob(&row[dim * 3 * k..(dim + 1) * 3 * k], k, target, hp.bins);
            }
            let logit = row[2 * 3 * k];
            let y = if a[2] > 0.0 { 1.0 } else { 0.0 };
            // -log sigmoid(l) for y = 1, -log(1 - sigmoid(l)) for y = 0
            let p = sigmoid(logit);
            step -= if y == 1.0 { p.ln() } else { (1.0 - p).ln() };
            nll += step;
        }
    }
    let n = windows.len() as f64;
    let (nll, kl) = (nll / n, kl / n);
    (nll + hp.beta * kl, nll, kl)
}

pub fn critic(store: &ParamStore, s: &[f64], goal: &[f64], a: &[f64]) -> f64 {
    let es = embed(store, "embed_s", s);
    let eg = embed(store, "embed_g", goal);
    let x = concat(&[&es, &eg, &vec![a.to_vec()]]);
    mlp(store, "mlp", &x, false)[0][0]
}

pub struct CqlCase<'a> {
    pub s: &'a [f64],
    pub s_next: &'a [f64],
    pub goal: &'a [f64],
    pub z: &'a [f64],
    pub z_log_density: f64,
    pub reward: f64,
    pub target_noise: &'a [f64],
    pub uniform: &'a [Vec<f64>],
    pub policy_noise: &'a [Vec<f64>],
}

/// Conservative critic loss for one transition, summed over both critics.
pub fn cql_loss(
    critics: [&ParamStore; 2],
    targets: [&ParamStore; 2],
    actor: &ParamStore,
    gamma: f64,
    alpha: f64,
    c: &CqlCase,
) -> f64 {
    let d = c.z.len();
    let (m, l) = prior(actor, d, c.s_next, c.goal);
    let (z_next, _) = squashed_logdensity(&m[0], &l[0], c.target_noise);
    let y = if c.reward == 1.0 {
        1.0
    } else {
        let q1 = critic(targets[0], c.s_next, c.goal, &z_next);
        let q2 = critic(targets[1], c.s_next, c.goal, &z_next);
        c.reward + gamma * q1.min(q2)
    };
    let mut cands: Vec<(Vec<f64>, f64)> = vec![(c.z.to_vec(), c.z_log_density)];
    for u in c.uniform {
        cands.push((u.clone(), -(d as f64) * 2f64.ln()));
    }
    let (ma, la) = prior(actor, d, c.s, c.goal);
    for e in c.policy_noise {
        cands.push(squashed_logdensity(&ma[0], &la[0], e));
    }
    let mut total = 0.0;
    for q in critics {
        let q_data = critic(q, c.s, c.goal, c.z);
        let scores: Vec<f64> = cands.iter().map(|(a, lp)| critic(q, c.s, c.goal, a) - lp).collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + scores.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += (q_data - y).powi(2) + alpha * (lse - q_data);
    }
    total
}
