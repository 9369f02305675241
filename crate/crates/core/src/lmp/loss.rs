use rand::Rng;
use rand_distr::StandardNormal;

use super::{action_targets, LmpBundle, LmpError};
use crate::datastore::{Window, WINDOW_LEN};
use crate::numcore::dist::kl_balanced_var;
use crate::numcore::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmpLossParts {
    pub total: f64,
    /// Masked negative log-likelihood summed over steps, averaged over windows.
    pub nll: f64,
    /// Encoder-prior KL averaged over windows.
    pub kl: f64,
    /// Plans drawn from the encoder: one per window.
    pub plans_sampled: usize,
    pub decode_steps: usize,
    pub clamped_targets: usize,
}

/// Standard normal draws for the reparameterised plan of every window.
pub fn window_noise<R: Rng>(rng: &mut R, windows: usize, latent: usize) -> Vec<f64> {
    (0..windows * latent).map(|_| rng.sample(StandardNormal)).collect()
}

/// `-Σ_masked log π(a_t | s_t, z) + β · KL_balanced(q || p)`, averaged over
/// the batch. `noise` fixes the single plan sample of each window.
pub fn lmp_loss(
    g: &mut Graph,
    bundle: &LmpBundle,
    windows: &[Window],
    noise: &[f64],
) -> Result<(Var, LmpLossParts), LmpError> {
    let hp = &bundle.hp;
    let batch = windows.len();
    let seq = WINDOW_LEN;
    let latent = hp.latent_dim;

    let mut enc_obs = Vec::with_capacity(batch * seq * 9);
    let mut enc_mask = Vec::with_capacity(batch * seq);
    let mut first = Vec::with_capacity(batch * 9);
    let mut last = Vec::with_capacity(batch * 9);
    for w in windows {
        enc_obs.extend_from_slice(&w.observations);
        enc_mask.extend_from_slice(&w.mask);
        first.extend_from_slice(w.obs_row(0));
        last.extend_from_slice(w.obs_row(w.raw_len - 1));
    }
    let q = bundle.encoder.forward(g, &enc_obs, &enc_mask, batch)?;
    let p = bundle.prior.forward(g, &first, &last)?;

    let eps = g.constant_matrix(batch, latent, noise.to_vec());
    let std = g.exp(q.log_std);
    let shift = g.mul(std, eps)?;
    let pre = g.add(q.mean, shift)?;
    let z = g.tanh(pre);

    let dims = hp.mixture_dims();
    let mut dec_obs = Vec::with_capacity(batch * seq * 9);
    let mut mix_targets = Vec::with_capacity(batch * seq * dims);
    let mut grip = Vec::with_capacity(batch * seq);
    let mut mask = Vec::with_capacity(batch * seq);
    for t in 0..seq {
        for w in windows {
            dec_obs.extend_from_slice(w.obs_row(t));
            let (d, gr) = action_targets(w.action_row(t));
            mix_targets.extend_from_slice(&d);
            grip.push(gr);
            mask.push(if w.mask[t] { 1.0 } else { 0.0 });
        }
    }
    let head = bundle.decoder.forward_window(g, &dec_obs, z, batch, seq)?;
    let mix_w = dims * 3 * hp.components;
    let mix = g.slice_cols(head, 0, mix_w)?;
    let logit = g.slice_cols(head, mix_w, mix_w + 1)?;
    let (lp, clamped) = g.logistic_mixture_logprob(mix, &mix_targets, dims, hp.components, hp.bins)?;
    let lp = g.sum_cols(lp);
    // binary cross entropy with logits: softplus(l) - y l
    let y = g.constant_matrix(batch * seq, 1, grip);
    let yl = g.mul(logit, y)?;
    let sp = g.softplus(logit);
    let bce = g.sub(sp, yl)?;
    let step_nll = g.sub(bce, lp)?;
    let mask = g.constant_matrix(batch * seq, 1, mask);
    let masked = g.mul(step_nll, mask)?;
    let nll = g.sum(masked);
    let nll = g.scale(nll, 1.0 / batch as f64);

    let kl = kl_balanced_var(g, q, p, hp.kl_alpha)?;
    let kl = g.mean(kl);
    let weighted = g.scale(kl, hp.beta);
    let total = g.add(nll, weighted)?;

    let parts = LmpLossParts {
        total: g.scalar(total),
        nll: g.scalar(nll),
        kl: g.scalar(kl),
        plans_sampled: g.shape(z).0,
        decode_steps: g.shape(head).0,
        clamped_targets: clamped,
    };
    if !parts.total.is_finite() {
        let ids: Vec<String> = windows.iter().map(|w| format!("ep{}@{}+{}", w.episode, w.start, w.raw_len)).collect();
        return Err(LmpError::NonFinite(ids.join(",")));
    }
    Ok((total, parts))
}
