//! Probability distributions used by the plan and action heads.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, NumError, Var};

/// Lower clamp applied to logistic log-scales.
pub const LOG_SCALE_MIN: f64 = -7.0;
/// Clamp range for Gaussian log standard deviations.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self, NumError> {
        if mean.len() != log_std.len() {
            return Err(NumError::Shape(format!(
                "gaussian: mean has {} dims, log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(NumError::Domain("gaussian: non-finite log_std".into()));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_std: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `tanh(mean)`: the deterministic plan used at evaluation time.
    pub fn squashed_mean(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.tanh()).collect()
    }
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64, NumError> {
    if q.dim() != p.dim() {
        return Err(NumError::Shape(format!("gaussian_kl: {} vs {} dims", q.dim(), p.dim())));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_std[i], p.mean[i], p.log_std[i]);
        let d = mq - mp;
        kl += lp - lq + ((2.0 * lq).exp() + d * d) / (2.0 * (2.0 * lp).exp()) - 0.5;
    }
    Ok(kl)
}

/// `log(1 - tanh(x)^2)` without cancellation.
pub fn log_tanh_jacobian(x: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x))
}

/// Reparameterised sample pushed through `tanh`, with its log-density.
pub fn gaussian_sample_tanh<R: Rng>(params: &GaussianParams, rng: &mut R) -> (Vec<f64>, f64) {
    let mut z = Vec::with_capacity(params.dim());
    let mut logp = 0.0;
    for i in 0..params.dim() {
        let ls = params.log_std[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
        let eps: f64 = rng.sample(StandardNormal);
        let pre = params.mean[i] + ls.exp() * eps;
        logp += -0.5 * eps * eps - ls - HALF_LN_2PI - log_tanh_jacobian(pre);
        z.push(pre.tanh());
    }
    (z, logp)
}

/// Log-density of a squashed sample `z` in `(-1, 1)^d` under `tanh(N(mean, std))`.
pub fn tanh_gaussian_logprob(params: &GaussianParams, z: &[f64]) -> f64 {
    let mut logp = 0.0;
    for i in 0..params.dim() {
        let ls = params.log_std[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
        let pre = z[i].clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh();
        let e = (pre - params.mean[i]) / ls.exp();
        logp += -0.5 * e * e - ls - HALF_LN_2PI - log_tanh_jacobian(pre);
    }
    logp
}

/// Graph-side handle on a batch of diagonal Gaussians: `(rows, dim)` mean and log-std.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVars {
    /// Split a `(rows, 2 * dim)` head output into mean and clamped log-std.
    pub fn from_head(g: &mut Graph, head: Var, dim: usize) -> Result<Self, NumError> {
        let mean = g.slice_cols(head, 0, dim)?;
        let raw = g.slice_cols(head, dim, 2 * dim)?;
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok(Self { mean, log_std })
    }

    /// Row `r` as value-level parameters.
    pub fn row(&self, g: &Graph, r: usize) -> GaussianParams {
        GaussianParams {
            mean: g.value(self.mean).row_slice(r).to_vec(),
            log_std: g.value(self.log_std).row_slice(r).to_vec(),
        }
    }

    pub fn detach(&self, g: &mut Graph) -> Self {
        Self { mean: g.detach(self.mean), log_std: g.detach(self.log_std) }
    }
}

/// Per-row `KL(q || p)`, `(rows, 1)`.
pub fn gaussian_kl_var(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Result<Var, NumError> {
    // lp - lq + (exp(2 lq) + (mq - mp)^2) / (2 exp(2 lp)) - 1/2
    let dl = g.sub(p.log_std, q.log_std)?;
    let q2 = g.scale(q.log_std, 2.0);
    let var_q = g.exp(q2);
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.square(dm);
    let num = g.add(var_q, dm2)?;
    let p2 = g.scale(p.log_std, -2.0);
    let inv_var_p = g.exp(p2);
    let ratio = g.mul(num, inv_var_p)?;
    let half = g.scale(ratio, 0.5);
    let t = g.add(dl, half)?;
    let t = g.add_scalar(t, -0.5);
    Ok(g.sum_cols(t))
}

/// KL with asymmetric gradient routing: `alpha * KL(sg(q) || p) + (1 - alpha) * KL(q || sg(p))`.
///
/// The value equals the plain KL; the prior receives `alpha` of the gradient
/// and the posterior `1 - alpha`.
pub fn kl_balanced_var(g: &mut Graph, q: GaussianVars, p: GaussianVars, alpha: f64) -> Result<Var, NumError> {
    let q_sg = q.detach(g);
    let p_sg = p.detach(g);
    let to_prior = gaussian_kl_var(g, q_sg, p)?;
    let to_post = gaussian_kl_var(g, q, p_sg)?;
    let a = g.scale(to_prior, alpha);
    let b = g.scale(to_post, 1.0 - alpha);
    g.add(a, b)
}

/// Value-level balanced KL; equals [`gaussian_kl`].
pub fn kl_balanced(q: &GaussianParams, p: &GaussianParams, alpha: f64) -> Result<f64, NumError> {
    let k = gaussian_kl(q, p)?;
    Ok(alpha * k + (1.0 - alpha) * k)
}

/// Reparameterised tanh-Gaussian sample on the graph.
///
/// `noise` is `(rows, dim)` standard normal draws. Returns the squashed
/// sample and its per-row log-density `(rows, 1)`.
pub fn tanh_gaussian_rsample(g: &mut Graph, dist: GaussianVars, noise: Vec<f64>) -> Result<(Var, Var), NumError> {
    let (rows, dim) = g.shape(dist.mean);
    if noise.len() != rows * dim {
        return Err(NumError::Shape(format!("noise has {} values for ({rows},{dim})", noise.len())));
    }
    let base: Vec<f64> = noise
        .chunks(dim.max(1))
        .map(|ch| {
            ch.iter().map(|e| -0.5 * e * e - HALF_LN_2PI).sum::<f64>() - 2.0 * dim as f64 * std::f64::consts::LN_2
        })
        .collect();
    let eps = g.constant_matrix(rows, dim, noise);
    let std = g.exp(dist.log_std);
    let shift = g.mul(std, eps)?;
    let pre = g.add(dist.mean, shift)?;
    let z = g.tanh(pre);
    // log(1 - tanh^2(x)) = 2 (ln 2 - x - softplus(-2x))
    let m2 = g.scale(pre, -2.0);
    let sp = g.softplus(m2);
    let corr = g.add(pre, sp)?;
    let corr = g.sum_cols(corr);
    let corr = g.scale(corr, 2.0);
    let ls = g.sum_cols(dist.log_std);
    let base = g.constant_matrix(rows, 1, base);
    let lp = g.sub(base, ls)?;
    let lp = g.add(lp, corr)?;
    Ok((z, lp))
}

/// Per-row log-density of fixed squashed targets `z` (`rows * dim` values).
pub fn tanh_gaussian_logprob_var(g: &mut Graph, dist: GaussianVars, z: &[f64]) -> Result<Var, NumError> {
    let (rows, dim) = g.shape(dist.mean);
    if z.len() != rows * dim {
        return Err(NumError::Shape(format!("targets have {} values for ({rows},{dim})", z.len())));
    }
    let pre: Vec<f64> = z.iter().map(|v| v.clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh()).collect();
    let base: Vec<f64> =
        pre.chunks(dim.max(1)).map(|ch| ch.iter().map(|x| -HALF_LN_2PI - log_tanh_jacobian(*x)).sum()).collect();
    let pre = g.constant_matrix(rows, dim, pre);
    let diff = g.sub(pre, dist.mean)?;
    let neg_ls = g.neg(dist.log_std);
    let inv_std = g.exp(neg_ls);
    let e = g.mul(diff, inv_std)?;
    let e2 = g.square(e);
    let e2 = g.sum_cols(e2);
    let e2 = g.scale(e2, -0.5);
    let ls = g.sum_cols(dist.log_std);
    let lp = g.sub(e2, ls)?;
    let base = g.constant_matrix(rows, 1, base);
    g.add(lp, base)
}

// ---------------------------------------------------------------------------
// Discretised logistic mixture
// ---------------------------------------------------------------------------

/// Mixture head for one action dimension: `components` logits, means and log-scales.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticMixtureParams {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl LogisticMixtureParams {
    /// Parse the packed `[logits | means | log_scales]` layout.
    pub fn from_packed(packed: &[f64]) -> Result<Self, NumError> {
        if !packed.len().is_multiple_of(3) || packed.is_empty() {
            return Err(NumError::Shape(format!("mixture head of width {}", packed.len())));
        }
        let k = packed.len() / 3;
        Ok(Self {
            logits: packed[..k].to_vec(),
            means: packed[k..2 * k].to_vec(),
            log_scales: packed[2 * k..].iter().map(|v| v.max(LOG_SCALE_MIN)).collect(),
        })
    }

    pub fn packed(&self) -> Vec<f64> {
        let mut v = self.logits.clone();
        v.extend_from_slice(&self.means);
        v.extend_from_slice(&self.log_scales);
        v
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }
}

/// Bin containing `a`; values outside `[-1, 1]` land in the edge bins.
pub fn bin_index(a: f64, bins: usize) -> usize {
    if bins <= 1 || a.is_nan() {
        return 0;
    }
    let i = ((a + 1.0) * 0.5 * bins as f64).floor();
    if i < 0.0 {
        0
    } else {
        (i as usize).min(bins - 1)
    }
}

pub fn bin_center(i: usize, bins: usize) -> f64 {
    let w = 2.0 / bins as f64;
    -1.0 + (i as f64 + 0.5) * w
}

/// Log-mass of one logistic component on a bin, with derivatives w.r.t. the mean
/// and the (unclamped) log-scale.
fn component_log_mass(mu: f64, log_scale: f64, bin: usize, bins: usize) -> (f64, f64, f64) {
    if bins <= 1 {
        return (0.0, 0.0, 0.0);
    }
    let clamped = log_scale < LOG_SCALE_MIN;
    let ls = log_scale.max(LOG_SCALE_MIN);
    let inv = (-ls).exp();
    let w = 2.0 / bins as f64;
    let lower = -1.0 + bin as f64 * w;
    let upper = lower + w;
    let xu = (upper - mu) * inv;
    let xl = (lower - mu) * inv;
    let (f, dxu, dxl) = if bin == 0 {
        (-softplus(-xu), sigmoid(-xu), 0.0)
    } else if bin == bins - 1 {
        (-softplus(xl), 0.0, -sigmoid(xl))
    } else {
        // log(σ(u) - σ(l)) = log σ(u) + log(1 - σ(l)) + log(1 - e^{l-u})
        let delta = xu - xl;
        let em1 = delta.exp_m1();
        let f = -softplus(-xu) - softplus(xl) + (-(-delta).exp_m1()).ln();
        (f, sigmoid(-xu) + 1.0 / em1, -sigmoid(xl) - 1.0 / em1)
    };
    let dmu = -(dxu + dxl) * inv;
    let dls = if clamped { 0.0 } else { -(dxu * xu + dxl * xl) };
    (f, dmu, dls)
}

/// Log-probability of `target` under one packed mixture row, plus the gradient
/// of that log-probability w.r.t. the packed parameters.
pub fn logistic_mixture_row(packed: &[f64], components: usize, target: f64, bins: usize) -> (f64, Vec<f64>) {
    let k = components;
    let logits = &packed[..k];
    let lse_logits = logsumexp(logits);
    let bin = bin_index(target, bins);
    let mut a = vec![0.0; k];
    let mut dmu = vec![0.0; k];
    let mut dls = vec![0.0; k];
    for j in 0..k {
        let (f, gm, gs) = component_log_mass(packed[k + j], packed[2 * k + j], bin, bins);
        a[j] = logits[j] - lse_logits + f;
        dmu[j] = gm;
        dls[j] = gs;
    }
    let lp = logsumexp(&a);
    let mut grad = vec![0.0; 3 * k];
    for j in 0..k {
        let resp = (a[j] - lp).exp();
        let weight = (logits[j] - lse_logits).exp();
        grad[j] = resp - weight;
        grad[k + j] = resp * dmu[j];
        grad[2 * k + j] = resp * dls[j];
    }
    (lp, grad)
}

/// Log-probability of `action` summed over dimensions.
///
/// Components outside `[-1, 1]` are scored in the edge bin; the number of such
/// components is returned as the second value.
pub fn logistic_mixture_logprob(
    params: &[LogisticMixtureParams],
    action: &[f64],
    bins: usize,
) -> Result<(f64, usize), NumError> {
    if params.len() != action.len() {
        return Err(NumError::Shape(format!("{} mixture heads for {} action dims", params.len(), action.len())));
    }
    if bins < 2 {
        // A single bin always has mass one; allowed but degenerate.
        if bins == 0 {
            return Err(NumError::Domain("bin count must be positive".into()));
        }
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (p, &a) in params.iter().zip(action) {
        if !(-1.0..=1.0).contains(&a) {
            clamped += 1;
        }
        total += logistic_mixture_row(&p.packed(), p.components(), a, bins).0;
    }
    Ok((total, clamped))
}

/// Probability mass of every bin for one mixture head.
pub fn logistic_mixture_bin_masses(params: &LogisticMixtureParams, bins: usize) -> Vec<f64> {
    let packed = params.packed();
    (0..bins).map(|i| logistic_mixture_row(&packed, params.components(), bin_center(i, bins), bins).0.exp()).collect()
}

/// Centre of the most probable bin.
pub fn logistic_mixture_mode(packed: &[f64], components: usize, bins: usize) -> f64 {
    let k = components;
    let lse = logsumexp(&packed[..k]);
    let w = 2.0 / bins as f64;
    let mut mass = vec![0.0; bins];
    for j in 0..k {
        let weight = (packed[j] - lse).exp();
        let mu = packed[k + j];
        let inv = (-packed[2 * k + j].max(LOG_SCALE_MIN)).exp();
        let mut prev = 0.0;
        for (i, m) in mass.iter_mut().enumerate() {
            let cdf = if i + 1 == bins { 1.0 } else { sigmoid((-1.0 + (i + 1) as f64 * w - mu) * inv) };
            *m += weight * (cdf - prev);
            prev = cdf;
        }
    }
    let best = mass.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &m)| if m > b.1 { (i, m) } else { b });
    bin_center(best.0, bins)
}

/// Draw a continuous value from the mixture, clipped to `[-1, 1]`.
pub fn logistic_mixture_sample<R: Rng>(packed: &[f64], components: usize, rng: &mut R) -> f64 {
    let k = components;
    let logits = &packed[..k];
    let lse = logsumexp(logits);
    let mut u: f64 = rng.random();
    let mut j = k - 1;
    for (i, l) in logits.iter().enumerate() {
        let p = (l - lse).exp();
        if u < p {
            j = i;
            break;
        }
        u -= p;
    }
    let s = packed[2 * k + j].max(LOG_SCALE_MIN).exp();
    let v: f64 = rng.random_range(1e-5..1.0 - 1e-5);
    (packed[k + j] + s * (v.ln() - (1.0 - v).ln())).clamp(-1.0, 1.0)
}
