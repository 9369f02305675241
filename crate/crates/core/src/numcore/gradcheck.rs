//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, NumError, ParamStore, Var};

/// Denominator floor for the relative error, so that gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `backward` against `(f(θ + h) - f(θ - h)) / 2h` for up to
/// `per_param` randomly chosen coordinates of every parameter in `store`.
pub fn check_gradients<F, R>(
    store: &mut ParamStore,
    loss_fn: F,
    h: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumError>,
    R: Rng,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads.get(store, id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let picks = sample(rng, n, per_param.min(n));
        for i in picks {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let mut gp = Graph::new();
            let lp = loss_fn(&mut gp, store)?;
            let fp = gp.scalar(lp);
            store.get_mut(id).data_mut()[i] = orig - h;
            let mut gm = Graph::new();
            let lm = loss_fn(&mut gm, store)?;
            let fm = gm.scalar(lm);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}]: analytic {} numeric {numeric}", store.name(id), analytic[i]);
            }
        }
    }
    Ok(report)
}
