//! Checks shared by the integration tests and the acceptance gate. Each
//! returns a one-line summary on success and a diagnosis on failure.
#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use taco_rl::datastore::{mine_negative, Dataset, EpisodeRecord, NegativeSource, ProprioIndex, Window};
use taco_rl::env::{EnvAction, Observation, MAX_DELTA};
use taco_rl::hrl::{
    bellman_target, bootstrap_targets, cql_critic_loss, relabel, sample_goal, sample_offset, CqlHyperParams, CqlNoise,
    Critic, CriticShape, GoalBranch, GoalSamplerConfig, PlanTransition,
};
use taco_rl::lmp::{lmp_loss, LmpBundle, LmpHyperParams, PlanPrior};
use taco_rl::numcore::dist::{
    gaussian_kl, gaussian_kl_var, kl_balanced, kl_balanced_var, logistic_mixture_bin_masses, tanh_gaussian_logprob_var,
    tanh_gaussian_rsample, GaussianParams, GaussianVars, LogisticMixtureParams,
};
use taco_rl::numcore::gradcheck::{check_gradients, relative_error};
use taco_rl::numcore::nn::{Activation, AttentionBlock, CellKind, LayerNorm, Linear, Mlp, RecurrentCell};
use taco_rl::numcore::{Graph, NumError, ParamStore, Tensor, Var};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_POINTS: usize = 10;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NumError>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<(usize, usize)>,
    draw: fn(&mut ChaCha8Rng) -> f64,
    build: Build,
}

fn uniform(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(-1.0..1.0)
}

fn off_zero(r: &mut ChaCha8Rng) -> f64 {
    let v = r.random_range(0.1..1.0);
    if r.random_bool(0.5) {
        v
    } else {
        -v
    }
}

fn positive(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(0.2..2.0)
}

fn off_bounds(r: &mut ChaCha8Rng) -> f64 {
    // away from the clamp bounds at +-0.5
    let v: f64 = r.random_range(-1.0..1.0);
    if (v.abs() - 0.5).abs() < 0.05 {
        v * 0.8
    } else {
        v
    }
}

fn case(name: &'static str, shapes: &[(usize, usize)], draw: fn(&mut ChaCha8Rng) -> f64, build: Build) -> OpCase {
    OpCase { name, shapes: shapes.to_vec(), draw, build }
}

fn op_cases() -> Vec<OpCase> {
    let m = (3, 4);
    let mix_targets: Vec<f64> = {
        let mut r = rng(11);
        (0..6).map(|_| r.random_range(-1.0..1.0)).collect()
    };
    let mask = vec![true, true, false, true, true, true, true, false];
    let mut noise_rng = rng(12);
    let noise: Vec<f64> = (0..12).map(|_| noise_rng.sample(StandardNormal)).collect();
    let z_targets: Vec<f64> = (0..12).map(|_| noise_rng.random_range(-0.9..0.9)).collect();
    vec![
        case("matmul", &[(3, 4), (4, 2)], uniform, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("linear", &[(3, 4), (4, 2), (1, 2)], uniform, Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        case("add", &[m, m], uniform, Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", &[m, m], uniform, Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", &[m, m], uniform, Box::new(|g, v| g.mul(v[0], v[1]))),
        case("min", &[m, m], uniform, Box::new(|g, v| g.min(v[0], v[1]))),
        case("add_row", &[m, (1, 4)], uniform, Box::new(|g, v| g.add_row(v[0], v[1]))),
        case("mul_col", &[m, (3, 1)], uniform, Box::new(|g, v| g.mul_col(v[0], v[1]))),
        case("scale", &[m], uniform, Box::new(|g, v| Ok(g.scale(v[0], 2.5)))),
        case("neg", &[m], uniform, Box::new(|g, v| Ok(g.neg(v[0])))),
        case("add_scalar", &[m], uniform, Box::new(|g, v| Ok(g.add_scalar(v[0], 0.7)))),
        case("tanh", &[m], uniform, Box::new(|g, v| Ok(g.tanh(v[0])))),
        case("relu", &[m], off_zero, Box::new(|g, v| Ok(g.relu(v[0])))),
        case("sigmoid", &[m], uniform, Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        case("exp", &[m], uniform, Box::new(|g, v| Ok(g.exp(v[0])))),
        case("log", &[m], positive, Box::new(|g, v| Ok(g.log(v[0])))),
        case("softplus", &[m], uniform, Box::new(|g, v| Ok(g.softplus(v[0])))),
        case("square", &[m], uniform, Box::new(|g, v| Ok(g.square(v[0])))),
        case("clamp", &[m], off_bounds, Box::new(|g, v| Ok(g.clamp(v[0], -0.5, 0.5)))),
        case("sum", &[m], uniform, Box::new(|g, v| Ok(g.sum(v[0])))),
        case("mean", &[m], uniform, Box::new(|g, v| Ok(g.mean(v[0])))),
        case("sum_cols", &[m], uniform, Box::new(|g, v| Ok(g.sum_cols(v[0])))),
        case("mean_rows", &[m], uniform, Box::new(|g, v| Ok(g.mean_rows(v[0])))),
        case("logsumexp_cols", &[m], uniform, Box::new(|g, v| Ok(g.logsumexp_cols(v[0])))),
        case("concat_cols", &[(3, 2), (3, 3)], uniform, Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        case("slice_cols", &[(3, 5)], uniform, Box::new(|g, v| g.slice_cols(v[0], 1, 4))),
        case("concat_rows", &[(2, 3), (3, 3)], uniform, Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        case("slice_rows", &[(5, 3)], uniform, Box::new(|g, v| g.slice_rows(v[0], 1, 4))),
        case("gather_rows", &[(4, 3)], uniform, Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 1]))),
        case("layer_norm", &[(3, 5), (1, 5), (1, 5)], uniform, Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]))),
        case(
            "attention",
            &[(8, 6), (8, 6), (8, 6)],
            uniform,
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], &mask, 2, 4, 2)),
        ),
        case(
            "logistic_mixture_logprob",
            &[(3, 18)],
            uniform,
            Box::new(move |g, v| Ok(g.logistic_mixture_logprob(v[0], &mix_targets, 2, 3, 256)?.0)),
        ),
        case(
            "gaussian_kl",
            &[m, m, m, m],
            uniform,
            Box::new(|g, v| {
                gaussian_kl_var(
                    g,
                    GaussianVars { mean: v[0], log_std: v[1] },
                    GaussianVars { mean: v[2], log_std: v[3] },
                )
            }),
        ),
        case(
            "gaussian_from_head",
            &[(3, 8)],
            uniform,
            Box::new(|g, v| {
                let d = GaussianVars::from_head(g, v[0], 4)?;
                g.concat_cols(&[d.mean, d.log_std])
            }),
        ),
        case(
            "tanh_gaussian_rsample",
            &[m, m],
            uniform,
            Box::new(move |g, v| {
                let (z, lp) = tanh_gaussian_rsample(g, GaussianVars { mean: v[0], log_std: v[1] }, noise.clone())?;
                g.concat_cols(&[z, lp])
            }),
        ),
        case(
            "tanh_gaussian_logprob",
            &[m, m],
            uniform,
            Box::new(move |g, v| tanh_gaussian_logprob_var(g, GaussianVars { mean: v[0], log_std: v[1] }, &z_targets)),
        ),
    ]
}

/// Largest relative error of `Σ w ⊙ f(θ)` against central differences, with
/// fresh output weights `w`.
fn fd_error<F>(
    store: &mut ParamStore,
    f: F,
    per_param: usize,
    r: &mut ChaCha8Rng,
) -> Result<(f64, usize, String), String>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>,
{
    let weights: Vec<f64> = (0..4096).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |g: &mut Graph, s: &ParamStore| -> Result<Var, NumError> {
        let out = f(g, s)?;
        let (rows, cols) = g.shape(out);
        let w = g.constant_matrix(rows, cols, weights[..rows * cols].to_vec());
        let m = g.mul(out, w)?;
        Ok(g.sum(m))
    };
    let rep = check_gradients(store, loss, FD_STEP, per_param, r).map_err(|e| e.to_string())?;
    Ok((rep.max_rel_error, rep.checked, rep.worst))
}

fn fill(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = r.random_range(-scale..scale));
    }
}

struct GradTally {
    worst: f64,
    worst_at: String,
    coords: usize,
    failures: Vec<String>,
}

impl GradTally {
    fn record(&mut self, name: &str, res: Result<(f64, usize, String), String>) {
        match res {
            Ok((err, n, at)) => {
                self.coords += n;
                if err > self.worst {
                    self.worst = err;
                    self.worst_at = format!("{name}: {at}");
                }
                if err >= GRAD_TOL {
                    self.failures.push(format!("{name} rel err {err:.2e} at {at}"));
                }
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }
}

fn layer_cases(t: &mut GradTally, r: &mut ChaCha8Rng) {
    let seq_mask = vec![true, true, true, false, true, false, true, true];
    for p in 0..GRAD_POINTS {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::zeros(&[3, 4]));
        let lin = Linear::new(&mut s, "lin", 4, 5, r);
        fill(&mut s, r, 1.0);
        t.record(
            &format!("Linear#{p}"),
            fd_error(
                &mut s,
                |g, st| {
                    let xv = g.param(st, x);
                    lin.forward(g, st, xv)
                },
                usize::MAX,
                r,
            ),
        );

        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::zeros(&[3, 4]));
        let mlp = Mlp::new(&mut s, "mlp", &[4, 6, 6, 2], Activation::Relu, Activation::Tanh, r);
        fill(&mut s, r, 1.0);
        t.record(
            &format!("Mlp#{p}"),
            fd_error(
                &mut s,
                |g, st| {
                    let xv = g.param(st, x);
                    mlp.forward(g, st, xv)
                },
                usize::MAX,
                r,
            ),
        );

        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::zeros(&[3, 6]));
        let ln = LayerNorm::new(&mut s, "ln", 6);
        fill(&mut s, r, 1.0);
        t.record(
            &format!("LayerNorm#{p}"),
            fd_error(
                &mut s,
                |g, st| {
                    let xv = g.param(st, x);
                    ln.forward(g, st, xv)
                },
                usize::MAX,
                r,
            ),
        );

        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::zeros(&[8, 4]));
        let blk = AttentionBlock::new(&mut s, "blk", 4, 2, 6, r);
        fill(&mut s, r, 1.0);
        let m = seq_mask.clone();
        t.record(
            &format!("AttentionBlock#{p}"),
            fd_error(
                &mut s,
                move |g, st| {
                    let xv = g.param(st, x);
                    blk.forward(g, st, xv, &m, 2, 4)
                },
                8,
                r,
            ),
        );

        for kind in [CellKind::Gru, CellKind::Tanh] {
            let mut s = ParamStore::new();
            let x = s.add("x", Tensor::zeros(&[3, 4]));
            let h = s.add("h", Tensor::zeros(&[3, 5]));
            let cell = RecurrentCell::new(&mut s, "cell", kind, 4, 5, r);
            fill(&mut s, r, 1.0);
            t.record(
                &format!("RecurrentCell({kind:?})#{p}"),
                fd_error(
                    &mut s,
                    |g, st| {
                        let xv = g.param(st, x);
                        let hv = g.param(st, h);
                        // two steps so the recurrence itself is differentiated
                        let h1 = cell.step(g, st, xv, hv)?;
                        cell.step(g, st, xv, h1)
                    },
                    usize::MAX,
                    r,
                ),
            );
        }
    }
}

pub fn tiny_lmp(cell: CellKind) -> LmpHyperParams {
    LmpHyperParams {
        latent_dim: 3,
        embed_dim: 4,
        model_width: 4,
        heads: 2,
        ff_width: 5,
        blocks: 1,
        prior_width: 5,
        prior_layers: 2,
        decoder_hidden: 4,
        decoder_layers: 2,
        cell,
        components: 2,
        bins: 256,
        ..LmpHyperParams::default()
    }
}

/// A random play episode of `len` steps. Some deltas exceed the action limit.
pub fn synthetic_episode(r: &mut ChaCha8Rng, id: u32, len: usize) -> EpisodeRecord {
    let obs: Vec<Observation> = (0..len)
        .map(|_| {
            let mut o = [0.0; 9];
            for (i, v) in o.iter_mut().enumerate() {
                *v = if i == 2 {
                    if r.random_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    r.random_range(0.0..1.0)
                };
            }
            Observation(o)
        })
        .collect();
    let acts: Vec<EnvAction> = (0..len)
        .map(|_| {
            let lim = 1.3 * MAX_DELTA;
            EnvAction::new(
                r.random_range(-lim..lim),
                r.random_range(-lim..lim),
                if r.random_bool(0.5) { 1.0 } else { -1.0 },
            )
        })
        .collect();
    EpisodeRecord::from_steps(id, &obs, &acts)
}

pub fn loss_windows(r: &mut ChaCha8Rng) -> (Dataset, Vec<Window>) {
    let ds = Dataset::new(vec![synthetic_episode(r, 0, 40)], None).expect("dataset");
    let windows = vec![Window::extract(&ds, 0, 0, 16), Window::extract(&ds, 0, 5, 9), Window::extract(&ds, 0, 20, 12)];
    (ds, windows)
}

/// Central differences on the parameters of one store inside `obj`,
/// perturbed in place so gradients stay keyed to that store.
fn fd_in_place<T, L>(
    obj: &mut T,
    store_of: fn(&mut T) -> &mut ParamStore,
    loss: L,
    per_param: usize,
    r: &mut ChaCha8Rng,
) -> Result<(f64, usize, String), String>
where
    L: Fn(&mut Graph, &T) -> Result<Var, NumError>,
{
    let value = |obj: &T| -> Result<f64, String> {
        let mut g = Graph::new();
        let l = loss(&mut g, obj).map_err(|e| e.to_string())?;
        Ok(g.scalar(l))
    };
    let mut g = Graph::new();
    let l = loss(&mut g, obj).map_err(|e| e.to_string())?;
    let grads = g.backward(l).map_err(|e| e.to_string())?;
    // compare on the loss scaled to unit size
    let scale = value(obj)?.abs().max(1.0);
    let ids: Vec<_> = store_of(obj).ids().collect();
    let (mut worst, mut at, mut n) = (0.0, String::new(), 0);
    for id in ids {
        let len = store_of(obj).get(id).len();
        let analytic = grads.get(store_of(obj), id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for i in rand::seq::index::sample(r, len, per_param.min(len)) {
            let mut central = |h: f64| -> Result<f64, String> {
                let orig = store_of(obj).get(id).data()[i];
                store_of(obj).get_mut(id).data_mut()[i] = orig + h;
                let fp = value(obj)?;
                store_of(obj).get_mut(id).data_mut()[i] = orig - h;
                let fm = value(obj)?;
                store_of(obj).get_mut(id).data_mut()[i] = orig;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = central(FD_STEP)?;
            // a ReLU switching inside the step makes the estimate depend on the step
            let half = central(FD_STEP / 2.0)?;
            if relative_error(numeric / scale, half / scale) > GRAD_TOL / 10.0 {
                KINKS.with(|k| k.set(k.get() + 1));
                continue;
            }
            let err = relative_error(analytic[i] / scale, numeric / scale);
            n += 1;
            if err > worst {
                worst = err;
                at = format!("{}[{i}]: analytic {} numeric {numeric}", store_of(obj).name(id), analytic[i]);
            }
        }
    }
    Ok((worst, n, at))
}

thread_local! {
    static KINKS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

fn composite_cases(t: &mut GradTally, r: &mut ChaCha8Rng) {
    let (_, windows) = loss_windows(r);
    for p in 0..GRAD_POINTS {
        let cell = if p % 2 == 0 { CellKind::Gru } else { CellKind::Tanh };
        // β = 0: the balanced KL routes only part of its gradient by construction
        let hp = LmpHyperParams { beta: 0.0, ..tiny_lmp(cell) };
        let mut bundle = LmpBundle::new(&hp, r);
        fill(&mut bundle.encoder.store, r, 0.5);
        fill(&mut bundle.decoder.store, r, 0.5);
        let noise: Vec<f64> = (0..windows.len() * hp.latent_dim).map(|_| r.sample(StandardNormal)).collect();
        let loss = |g: &mut Graph, b: &LmpBundle| {
            Ok(lmp_loss(g, b, &windows, &noise).map_err(|e| NumError::Domain(e.to_string()))?.0)
        };
        t.record(&format!("lmp_loss/encoder#{p}"), fd_in_place(&mut bundle, |b| &mut b.encoder.store, loss, 3, r));
        t.record(&format!("lmp_loss/decoder#{p}"), fd_in_place(&mut bundle, |b| &mut b.decoder.store, loss, 3, r));
    }
}

/// Every graph op, distribution op and layer against central differences at
/// `GRAD_POINTS` random points each.
pub fn gradient_integrity() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    let mut t = GradTally { worst: 0.0, worst_at: String::new(), coords: 0, failures: vec![] };
    let cases = op_cases();
    let n_ops = cases.len();
    for c in &cases {
        for p in 0..GRAD_POINTS {
            let mut store = ParamStore::new();
            let ids: Vec<_> = c
                .shapes
                .iter()
                .enumerate()
                .map(|(i, &(rows, cols))| {
                    let data = (0..rows * cols).map(|_| (c.draw)(&mut r)).collect();
                    store.add(format!("in{i}"), Tensor::matrix(rows, cols, data))
                })
                .collect();
            let res = fd_error(
                &mut store,
                |g, st| {
                    let vars: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
                    (c.build)(g, &vars)
                },
                usize::MAX,
                &mut r,
            );
            t.record(&format!("{}#{p}", c.name), res);
        }
    }
    layer_cases(&mut t, &mut r);
    composite_cases(&mut t, &mut r);
    let secs = start.elapsed().as_secs_f64();
    if !t.failures.is_empty() {
        return Err(format!("{} failures: {}", t.failures.len(), t.failures.join("; ")));
    }
    if secs >= 60.0 {
        return Err(format!("gradient checks took {secs:.1}s"));
    }
    let kinks = KINKS.with(|k| k.replace(0));
    Ok(format!(
        "{n_ops} ops + 6 layers + 2 composite losses x {GRAD_POINTS} points, {} coordinates ({kinks} at ReLU kinks skipped), max rel err {:.2e} ({}), {secs:.1}s",
        t.coords, t.worst, t.worst_at
    ))
}

/// `detach` blocks the gradient entirely.
pub fn detach_blocks_gradient() -> Check {
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::matrix(2, 2, vec![0.3, -0.2, 0.9, 1.1]));
    let mut g = Graph::new();
    let xv = g.param(&s, x);
    let d = g.detach(xv);
    let sq = g.square(d);
    let loss = g.sum(sq);
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let gx = grads.get(&s, x).map(<[f64]>::to_vec).unwrap_or_default();
    if gx.iter().all(|v| *v == 0.0) {
        Ok("detached branch has zero gradient".into())
    } else {
        Err(format!("gradient leaked through detach: {gx:?}"))
    }
}

// ---------------------------------------------------------------------------
// distributions
// ---------------------------------------------------------------------------

fn random_gaussian(r: &mut ChaCha8Rng, dim: usize) -> GaussianParams {
    GaussianParams::new(
        (0..dim).map(|_| r.random_range(-1.0..1.0)).collect(),
        (0..dim).map(|_| r.random_range(-1.0..0.5)).collect(),
    )
    .expect("matched dims")
}

fn gaussian_logpdf(x: &[f64], g: &GaussianParams) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let s = g.log_std[i].exp();
            -0.5 * ((v - g.mean[i]) / s).powi(2) - g.log_std[i] - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

pub const KL_MC_SAMPLES: usize = 1_000_000;

/// Closed-form KL against a Monte Carlo estimate, within 3 standard errors.
pub fn kl_monte_carlo() -> Check {
    let mut r = rng(2);
    let mut lines = Vec::new();
    for pair in 0..3 {
        let q = random_gaussian(&mut r, 4);
        let p = random_gaussian(&mut r, 4);
        let exact = gaussian_kl(&q, &p).map_err(|e| e.to_string())?;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let mut x = vec![0.0; 4];
        for _ in 0..KL_MC_SAMPLES {
            for (i, xi) in x.iter_mut().enumerate() {
                let e: f64 = r.sample(StandardNormal);
                *xi = q.mean[i] + q.log_std[i].exp() * e;
            }
            let d = gaussian_logpdf(&x, &q) - gaussian_logpdf(&x, &p);
            sum += d;
            sum_sq += d * d;
        }
        let n = KL_MC_SAMPLES as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) / (n - 1.0)).sqrt();
        let z = (mean - exact) / se;
        if z.abs() > 3.0 {
            return Err(format!("pair {pair}: closed form {exact:.6} vs MC {mean:.6} ({z:.2} SE)"));
        }
        lines.push(format!("{z:+.2}"));
    }
    Ok(format!("3 pairs, {KL_MC_SAMPLES} samples each, deviations [{}] SE", lines.join(", ")))
}

/// Bin masses of random mixture heads sum to one.
pub fn mixture_masses() -> Check {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut heads = 0;
    for bins in [2, 16, 256] {
        for _ in 0..100 {
            let k = r.random_range(1..=10);
            let mut packed = Vec::with_capacity(3 * k);
            packed.extend((0..k).map(|_| r.random_range(-3.0..3.0)));
            packed.extend((0..k).map(|_| r.random_range(-1.5..1.5)));
            packed.extend((0..k).map(|_| r.random_range(-7.0..1.0)));
            let p = LogisticMixtureParams::from_packed(&packed).map_err(|e| e.to_string())?;
            let total: f64 = logistic_mixture_bin_masses(&p, bins).iter().sum();
            worst = worst.max((total - 1.0).abs());
            heads += 1;
        }
    }
    if worst <= 1e-6 {
        Ok(format!("{heads} heads over 2/16/256 bins, max |Σ - 1| = {worst:.1e}"))
    } else {
        Err(format!("bin masses off by {worst:.3e}"))
    }
}

pub const GEOM_DRAWS: usize = 100_000;

/// Chi-square goodness of fit of the offset sampler to `(1-p)^(d-1) p`.
pub fn geometric_fit() -> Check {
    let p = 0.3;
    let mut r = rng(4);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for _ in 0..GEOM_DRAWS {
        let d = sample_offset(&mut r, p);
        if d == 0 {
            return Err("offset 0 drawn".into());
        }
        *counts.entry(d).or_default() += 1;
    }
    let n = GEOM_DRAWS as f64;
    let pmf = |d: usize| (1.0 - p).powi(d as i32 - 1) * p;
    // last category pools the tail so every expected count is at least 5
    let mut k = 1;
    while n * (1.0 - p).powi(k as i32) >= 5.0 && n * pmf(k + 1) >= 5.0 {
        k += 1;
    }
    let mut stat = 0.0;
    for d in 1..k {
        let o = *counts.get(&d).unwrap_or(&0) as f64;
        let e = n * pmf(d);
        stat += (o - e).powi(2) / e;
    }
    let tail_o = counts.range(k..).map(|(_, c)| *c).sum::<usize>() as f64;
    let tail_e = n * (1.0 - p).powi(k as i32 - 1);
    stat += (tail_o - tail_e).powi(2) / tail_e;
    let df = (k - 1) as f64;
    let pval = 1.0 - ChiSquared::new(df).map_err(|e| e.to_string())?.cdf(stat);
    let p1 = *counts.get(&1).unwrap_or(&0) as f64 / n;
    if pval > 0.01 {
        Ok(format!("chi2 {stat:.2} on {df} df, p = {pval:.3}, P(1) = {p1:.4}"))
    } else {
        Err(format!("chi2 {stat:.2} on {df} df gives p = {pval:.4}"))
    }
}

// ---------------------------------------------------------------------------
// relabeling and negative mining
// ---------------------------------------------------------------------------

/// Every `(t, Δ)` pair of a 200-step episode against the closed form, then
/// sampled goals against that table.
pub fn relabel_brute_force() -> Check {
    let len = 200;
    let cfg = GoalSamplerConfig::default();
    let stride = cfg.k - 1;
    let mut r = rng(5);
    let ep = synthetic_episode(&mut r, 0, len);
    let ds = Dataset::new(vec![ep], None).map_err(|e| e.to_string())?;
    let index = ProprioIndex::build(&ds);
    let mut table: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
    for t in 0..len - stride {
        let mut delta = 1;
        loop {
            let goal = (t + delta * stride).min(len - 1);
            table.insert((t, delta), (goal, if delta == 1 { 1.0 } else { 0.0 }));
            if t + delta * stride >= len - 1 {
                break;
            }
            delta += 1;
        }
    }
    for (&(t, d), &want) in &table {
        if relabel(len, t, stride, d) != want {
            return Err(format!("relabel(t={t}, Δ={d}) = {:?}, expected {want:?}", relabel(len, t, stride, d)));
        }
    }
    let ep = ds.episode(0);
    let mut checked = 0;
    for _ in 0..20_000 {
        let t = r.random_range(0..len - stride);
        let s = sample_goal(&mut r, &cfg, &ds, &index, 0, t);
        match s.branch {
            GoalBranch::Positive { delta } => {
                // offsets past the enumerated range saturate at the final step
                let (idx, want_r) = table.get(&(t, delta)).copied().unwrap_or((len - 1, 0.0));
                if s.goal != ep.observation(idx) || s.reward != want_r {
                    return Err(format!(
                        "sampled goal at t={t}, Δ={delta} disagrees with enumeration (r={})",
                        s.reward
                    ));
                }
                checked += 1;
            }
            GoalBranch::Negative(_) if s.reward != 0.0 => return Err("negative goal with nonzero reward".into()),
            GoalBranch::Negative(_) => {}
        }
    }
    Ok(format!("{} (t, Δ) pairs enumerated, {checked} sampled positives agree", table.len()))
}

/// Fraction of goals from the negative branch.
pub fn negative_frequency() -> Check {
    let cfg = GoalSamplerConfig::default();
    let mut r = rng(6);
    let ds = Dataset::new(vec![synthetic_episode(&mut r, 0, 200)], None).map_err(|e| e.to_string())?;
    let index = ProprioIndex::build(&ds);
    let n = 100_000;
    let neg = (0..n)
        .filter(|_| {
            let t = r.random_range(0..200 - cfg.stride());
            matches!(sample_goal(&mut r, &cfg, &ds, &index, 0, t).branch, GoalBranch::Negative(_))
        })
        .count();
    let f = neg as f64 / n as f64;
    if (f - 0.10).abs() <= 0.01 {
        Ok(format!("negative fraction {f:.4} over {n} draws"))
    } else {
        Err(format!("negative fraction {f:.4} outside 0.10 ± 0.01"))
    }
}

fn clustered_states(r: &mut ChaCha8Rng, n: usize) -> Vec<Observation> {
    let centres: Vec<[f64; 3]> = (0..30)
        .map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0), if r.random_bool(0.5) { 1.0 } else { -1.0 }])
        .collect();
    (0..n)
        .map(|_| {
            let c = centres[r.random_range(0..centres.len())];
            let mut o = [0.0; 9];
            o[0] = c[0] + 0.02 * r.sample::<f64, _>(StandardNormal);
            o[1] = c[1] + 0.02 * r.sample::<f64, _>(StandardNormal);
            o[2] = c[2];
            for v in &mut o[3..] {
                *v = if r.random_bool(0.3) { 0.5 } else { r.random_range(0.0..1.0) };
            }
            Observation(o)
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `mine_negative` against a linear scan with the same random stream.
pub fn mining_brute_force() -> Check {
    let mut r = rng(7);
    let (mut mined, mut fallback) = (0, 0);
    for dataset in 0..5 {
        let states = clustered_states(&mut r, 1000);
        let index = ProprioIndex::from_observations(states.clone());
        for q in 0..100 {
            let anchor =
                if q % 2 == 0 { states[r.random_range(0..states.len())] } else { clustered_states(&mut r, 1)[0] };
            let mut a = rng(1000 * dataset + q);
            let mut b = a.clone();
            let (got, src) = mine_negative(&index, &anchor, &mut a);
            let cands: Vec<usize> = (0..states.len())
                .filter(|&i| {
                    dist(states[i].proprio(), anchor.proprio()) <= 0.05
                        && dist(states[i].scene(), anchor.scene()) >= 0.1
                })
                .collect();
            let (want, want_src) = if cands.is_empty() {
                (states[b.random_range(0..states.len())], NegativeSource::Fallback)
            } else {
                (states[cands[b.random_range(0..cands.len())]], NegativeSource::Mined)
            };
            if got != want || src != want_src {
                return Err(format!("dataset {dataset} query {q}: index and scan disagree ({src:?} vs {want_src:?})"));
            }
            match src {
                NegativeSource::Mined => mined += 1,
                NegativeSource::Fallback => fallback += 1,
            }
        }
    }
    if mined == 0 || fallback == 0 {
        return Err(format!("degenerate cover: {mined} mined, {fallback} fallback"));
    }
    Ok(format!("5 datasets x 100 queries match the scan ({mined} mined, {fallback} fallback)"))
}

// ---------------------------------------------------------------------------
// loss recomputation
// ---------------------------------------------------------------------------

pub const LOSS_TOL: f64 = 1e-8;

fn set_all(store: &mut ParamStore, v: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(v);
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= LOSS_TOL * b.abs().max(1.0)
}

/// `lmp_loss` against the plain-loop recomputation for both recurrent cells,
/// with all weights 0.1 and with seeded random weights.
pub fn lmp_loss_oracle() -> Check {
    let mut r = rng(8);
    let (_, windows) = loss_windows(&mut r);
    let mut worst: f64 = 0.0;
    for cell in [CellKind::Gru, CellKind::Tanh] {
        for weights in ["0.1", "seeded"] {
            let hp = tiny_lmp(cell);
            let mut b = LmpBundle::new(&hp, &mut r);
            for s in [&mut b.encoder.store, &mut b.prior.store, &mut b.decoder.store] {
                if weights == "0.1" {
                    set_all(s, 0.1);
                } else {
                    fill(s, &mut r, 0.5);
                }
            }
            let noise: Vec<f64> = (0..windows.len() * hp.latent_dim).map(|_| r.sample(StandardNormal)).collect();
            let mut g = Graph::new();
            let (_, parts) = lmp_loss(&mut g, &b, &windows, &noise).map_err(|e| e.to_string())?;
            let ow: Vec<oracle::LmpWindow> = windows
                .iter()
                .map(|w| oracle::LmpWindow { obs: &w.observations, actions: &w.actions, mask: &w.mask })
                .collect();
            let (total, nll, kl) =
                oracle::lmp_loss(&b.encoder.store, &b.prior.store, &b.decoder.store, &hp, &ow, &noise, MAX_DELTA);
            for (name, got, want) in [("total", parts.total, total), ("nll", parts.nll, nll), ("kl", parts.kl, kl)] {
                if !close(got, want) {
                    return Err(format!("{cell:?}/{weights}: {name} {got:.12} vs oracle {want:.12}"));
                }
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
            }
        }
    }
    Ok(format!("2 cells x 2 weight sets, 3 windows, max rel diff {worst:.1e}"))
}

pub fn tiny_critic_shape() -> CriticShape {
    CriticShape { embed_dim: 3, width: 4, layers: 2 }
}

fn obs_row(r: &mut ChaCha8Rng) -> Vec<f64> {
    synthetic_episode(r, 0, 1).observations().to_vec()
}

/// `cql_critic_loss` for one transition and a hand-written candidate set.
pub fn cql_loss_oracle() -> Check {
    let mut r = rng(9);
    let latent = 3;
    let hp_lmp = LmpHyperParams { prior_layers: 2, ..tiny_lmp(CellKind::Tanh) };
    let uniform = vec![vec![0.5, -0.25, 0.75], vec![-0.9, 0.1, 0.3]];
    let policy = vec![vec![0.3, -1.2, 0.8], vec![1.5, 0.2, -0.4]];
    let target_noise = vec![0.1, -0.5, 0.7];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for weights in ["0.1", "seeded"] {
        for reward in [0.0, 1.0] {
            let mut nets: Vec<Critic> = (0..4).map(|_| Critic::new(&tiny_critic_shape(), latent, &mut r)).collect();
            let mut actor = PlanPrior::new(&hp_lmp, &mut r);
            for s in nets.iter_mut().map(|c| &mut c.store).chain([&mut actor.store]) {
                if weights == "0.1" {
                    set_all(s, 0.1);
                } else {
                    fill(s, &mut r, 0.5);
                }
            }
            let s = obs_row(&mut r);
            let s_next = obs_row(&mut r);
            let goal = obs_row(&mut r);
            let z = vec![0.2, -0.6, 0.4];
            let tr = PlanTransition {
                s_t: Observation::from_slice(&s),
                z: z.clone(),
                z_log_density: 1.3,
                s_next: Observation::from_slice(&s_next),
                s_g: Observation::from_slice(&goal),
                reward,
                terminal: reward == 1.0,
            };
            let batch = PlanTransition::batch(&[tr]);
            let hp = CqlHyperParams {
                n_samples: 2,
                cql_alpha: 0.7,
                gamma: 0.95,
                critic: tiny_critic_shape(),
                ..CqlHyperParams::default()
            };
            let noise = CqlNoise { target: target_noise.clone(), uniform: uniform.clone(), policy: policy.clone() };
            let mut g = Graph::new();
            let (_, parts) =
                cql_critic_loss(&mut g, &batch, [&nets[0], &nets[1]], [&nets[2], &nets[3]], &actor, &hp, &noise)
                    .map_err(|e| e.to_string())?;
            let case = oracle::CqlCase {
                s: &s,
                s_next: &s_next,
                goal: &goal,
                z: &z,
                z_log_density: 1.3,
                reward,
                target_noise: &target_noise,
                uniform: &uniform,
                policy_noise: &policy,
            };
            let want = oracle::cql_loss(
                [&nets[0].store, &nets[1].store],
                [&nets[2].store, &nets[3].store],
                &actor.store,
                0.95,
                0.7,
                &case,
            );
            if !close(parts.total, want) {
                return Err(format!("{weights} weights, r={reward}: loss {:.12} vs oracle {want:.12}", parts.total));
            }
            worst = worst.max((parts.total - want).abs() / want.abs().max(1.0));
            cases += 1;
        }
    }
    Ok(format!("{cases} cases (all-0.1 and seeded weights, r in {{0,1}}), max rel diff {worst:.1e}"))
}

/// Rewarded rows back up to exactly 1; a constant 0.5 critic gives 0.475 at γ = 0.95.
pub fn bellman_checks() -> Check {
    let mut r = rng(10);
    let shape = tiny_critic_shape();
    let mut targets: Vec<Critic> = (0..2).map(|_| Critic::new(&shape, 3, &mut r)).collect();
    for t in &mut targets {
        fill(&mut t.store, &mut r, 2.0);
    }
    let mut actor = PlanPrior::new(&tiny_lmp(CellKind::Tanh), &mut r);
    fill(&mut actor.store, &mut r, 0.5);
    let rows: Vec<PlanTransition> = (0..8)
        .map(|i| PlanTransition {
            s_t: Observation::from_slice(&obs_row(&mut r)),
            z: vec![0.1, 0.2, -0.3],
            z_log_density: 0.0,
            s_next: Observation::from_slice(&obs_row(&mut r)),
            s_g: Observation::from_slice(&obs_row(&mut r)),
            reward: if i % 2 == 0 { 1.0 } else { 0.0 },
            terminal: i % 2 == 0,
        })
        .collect();
    let batch = PlanTransition::batch(&rows);
    let hp = CqlHyperParams { critic: shape, ..CqlHyperParams::default() };
    let noise: Vec<f64> = (0..8 * 3).map(|_| r.sample(StandardNormal)).collect();
    let y = bellman_target(&batch, [&targets[0], &targets[1]], &actor, &hp, noise).map_err(|e| e.to_string())?;
    for (i, v) in y.iter().enumerate() {
        if i % 2 == 0 && *v != 1.0 {
            return Err(format!("row {i}: r = 1 gives target {v}"));
        }
    }
    for t in &mut targets {
        set_all(&mut t.store, 0.0);
        let last = t.store.ids().last().expect("bias");
        t.store.get_mut(last).data_mut()[0] = 0.5;
    }
    let zero_r = PlanTransition::batch(&rows[1..2]);
    let y = bootstrap_targets(&zero_r, [&targets[0], &targets[1]], &[0.0, 0.0, 0.0], 0.95, false)
        .map_err(|e| e.to_string())?;
    if (y[0] - 0.475).abs() > 1e-15 {
        return Err(format!("r = 0 with min target Q 0.5 gives {}", y[0]));
    }
    Ok(format!("4 rewarded rows give exactly 1, unrewarded row with Q = 0.5 gives {}", y[0]))
}

// ---------------------------------------------------------------------------
// KL balancing
// ---------------------------------------------------------------------------

/// Value identity over 100 random pairs, then the α : (1 − α) gradient split.
pub fn kl_balance() -> Check {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = r.random_range(1..=8);
        let q = random_gaussian(&mut r, dim);
        let p = random_gaussian(&mut r, dim);
        let alpha = r.random_range(0.05..0.95);
        let plain = gaussian_kl(&q, &p).map_err(|e| e.to_string())?;
        let bal = kl_balanced(&q, &p, alpha).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let qv = GaussianVars {
            mean: g.constant_matrix(1, dim, q.mean.clone()),
            log_std: g.constant_matrix(1, dim, q.log_std.clone()),
        };
        let pv = GaussianVars {
            mean: g.constant_matrix(1, dim, p.mean.clone()),
            log_std: g.constant_matrix(1, dim, p.log_std.clone()),
        };
        let kv = kl_balanced_var(&mut g, qv, pv, alpha).map_err(|e| e.to_string())?;
        let graph = g.scalar(kv);
        worst = worst.max((bal - plain).abs()).max((graph - plain).abs());
    }
    if worst > 1e-12 {
        return Err(format!("balanced KL differs from KL by {worst:.2e}"));
    }
    let alpha = 0.8;
    let dim = 4;
    let mut s = ParamStore::new();
    let q0 = random_gaussian(&mut r, dim);
    let p0 = random_gaussian(&mut r, dim);
    let ids = [
        s.add("mq", Tensor::row(q0.mean.clone())),
        s.add("lq", Tensor::row(q0.log_std.clone())),
        s.add("mp", Tensor::row(p0.mean.clone())),
        s.add("lp", Tensor::row(p0.log_std.clone())),
    ];
    let mut g = Graph::new();
    let v: Vec<Var> = ids.iter().map(|&id| g.param(&s, id)).collect();
    let k = kl_balanced_var(
        &mut g,
        GaussianVars { mean: v[0], log_std: v[1] },
        GaussianVars { mean: v[2], log_std: v[3] },
        alpha,
    )
    .map_err(|e| e.to_string())?;
    let loss = g.sum(k);
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let value = |s: &ParamStore| {
        let get = |i: usize| s.get(ids[i]).data().to_vec();
        gaussian_kl(
            &GaussianParams { mean: get(0), log_std: get(1) },
            &GaussianParams { mean: get(2), log_std: get(3) },
        )
        .expect("dims")
    };
    let (mut num_q, mut num_p, mut ana_q, mut ana_p) = (0.0, 0.0, 0.0, 0.0);
    let mut worst_split: f64 = 0.0;
    for (n, &id) in ids.iter().enumerate() {
        let analytic = grads.get(&s, id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; dim]);
        for i in 0..dim {
            let orig = s.get(id).data()[i];
            s.get_mut(id).data_mut()[i] = orig + 1e-6;
            let fp = value(&s);
            s.get_mut(id).data_mut()[i] = orig - 1e-6;
            let fm = value(&s);
            s.get_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / 2e-6;
            let share = if n < 2 { 1.0 - alpha } else { alpha };
            worst_split = worst_split.max(relative_error(analytic[i], share * fd));
            if n < 2 {
                num_q += fd.abs();
                ana_q += analytic[i].abs();
            } else {
                num_p += fd.abs();
                ana_p += analytic[i].abs();
            }
        }
    }
    if worst_split > 1e-6 {
        return Err(format!("gradient split off by rel {worst_split:.2e}"));
    }
    Ok(format!(
        "100 pairs max |Δ| {worst:.1e}; at α = 0.8 prior gets {:.6} and posterior {:.6} of the FD gradient",
        ana_p / num_p,
        ana_q / num_q
    ))
}

// ---------------------------------------------------------------------------
// CLI pipeline
// ---------------------------------------------------------------------------

pub fn taco(args: &[&str]) -> i32 {
    let mut v = vec!["taco"];
    v.extend_from_slice(args);
    taco_rl::cli::main_with_args(v)
}

/// Settings small enough to run the whole pipeline in seconds.
pub fn micro_config(root: &Path, seed: u64) -> String {
    format!(
        "seed = {seed}\n\
         data_dir = {data}\n\
         out_dir = {out}\n\
         collect.episodes = 3\n\
         collect.steps_per_episode = 120\n\
         lmp.embed_dim = 8\n\
         lmp.model_width = 8\n\
         lmp.ff_width = 8\n\
         lmp.blocks = 1\n\
         lmp.prior_width = 8\n\
         lmp.prior_layers = 2\n\
         lmp.decoder_hidden = 8\n\
         lmp.decoder_layers = 1\n\
         lmp.batch = 4\n\
         lmp.epochs = 2\n\
         lmp.steps_per_epoch = 2\n\
         hrl.batch = 8\n\
         hrl.critic_embed_dim = 8\n\
         hrl.critic_width = 8\n\
         hrl.critic_layers = 2\n\
         hrl.bc_epochs = 1\n\
         hrl.steps = 3\n\
         hrl.pool_size = 32\n\
         flat.steps = 3\n\
         eval.n_chains = 3\n\
         eval.n_two_task = 3\n\
         eval.n_hard = 3\n\
         eval.seeds = {seed},{next}\n",
        data = root.join("data").display(),
        out = root.join("runs").display(),
        next = seed + 1,
    )
}

/// Collect, train every method and evaluate all three on every protocol.
pub fn run_pipeline(config: &Path, extra: &[&str]) -> Result<(), String> {
    let cfg = config.to_str().expect("utf-8 path");
    let steps: Vec<Vec<&str>> = vec![
        vec!["collect"],
        vec!["train-lmp"],
        vec!["train-hrl"],
        vec!["train-baseline", "cql-her"],
        vec!["eval", "--method", "taco", "--protocol", "chain5"],
        vec!["eval", "--method", "lmp", "--protocol", "chain5"],
        vec!["eval", "--method", "cql-her", "--protocol", "chain5"],
        vec!["eval", "--method", "taco", "--protocol", "single-goal-2task"],
        vec!["eval", "--method", "taco", "--protocol", "hard"],
    ];
    for s in steps {
        let mut args = vec!["--config", cfg];
        for e in extra {
            args.extend(["--set", e]);
        }
        args.extend(s.iter().copied());
        let code = taco(&args);
        if code != 0 {
            return Err(format!("`taco {}` exited {code}", s.join(" ")));
        }
    }
    Ok(())
}

fn files_with_ext(dir: &Path, ext: &[&str], out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut entries: Vec<_> = entries.flatten().map(|e| e.path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files_with_ext(&p, ext, out);
        } else if p.extension().and_then(|e| e.to_str()).is_some_and(|e| ext.contains(&e)) {
            out.push(p);
        }
    }
}

/// Run the micro pipeline twice with one seed and compare every CSV and
/// summary byte for byte.
pub fn determinism() -> Check {
    let roots = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut listings = Vec::new();
    for root in &roots {
        let cfg = root.path().join("taco.conf");
        fs::write(&cfg, micro_config(root.path(), 7)).map_err(|e| e.to_string())?;
        run_pipeline(&cfg, &[])?;
        let mut files = Vec::new();
        files_with_ext(root.path(), &["csv", "json"], &mut files);
        // run manifests record absolute paths
        files.retain(|p| !p.ends_with("run_manifest.json"));
        listings.push(files);
    }
    let rel = |root: &Path, p: &Path| p.strip_prefix(root).expect("under root").to_path_buf();
    let a: Vec<PathBuf> = listings[0].iter().map(|p| rel(roots[0].path(), p)).collect();
    let b: Vec<PathBuf> = listings[1].iter().map(|p| rel(roots[1].path(), p)).collect();
    if a != b {
        return Err(format!("runs produced different files: {a:?} vs {b:?}"));
    }
    let csvs = a.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    if csvs < 6 {
        return Err(format!("only {csvs} CSV files produced"));
    }
    for p in &a {
        let x = fs::read(roots[0].path().join(p)).map_err(|e| e.to_string())?;
        let y = fs::read(roots[1].path().join(p)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{} differs between identical runs", p.display()));
        }
    }
    Ok(format!("{} files ({csvs} CSV) identical across two runs", a.len()))
}
