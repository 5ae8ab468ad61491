//! Finite-difference checks of analytic parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gradients smaller than this are below central-difference resolution and
/// are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = format!("{}: analytic {analytic:e}, numeric {numeric:e}", what());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

fn grad_of(analytic: &[Option<Tensor>], id: ParamId, shape: (usize, usize)) -> Tensor {
    analytic
        .get(id.index())
        .and_then(|g| g.clone())
        .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
}

/// Central differences on individual entries. At most `max_per_tensor`
/// entries per parameter are probed, evenly spaced.
pub fn check_params_entrywise(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    analytic: &[Option<Tensor>],
    step: f64,
    max_per_tensor: usize,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        let shape = store.value(id).shape();
        let grad = grad_of(analytic, id, shape);
        let n = store.value(id).len();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + step;
            let up = loss(&work);
            work.value_mut(id).data_mut()[k] = orig - step;
            let down = loss(&work);
            work.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.record(|| format!("{}[{k}]", store.name(id)), grad.data()[k], numeric);
        }
    }
    report
}

/// Directional derivatives along one random unit direction per parameter
/// tensor, so every entry of every tensor contributes.
pub fn check_params_directional(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    analytic: &[Option<Tensor>],
    step: f64,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        let (r, c) = store.value(id).shape();
        let grad = grad_of(analytic, id, (r, c));
        let mut dir = Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let norm = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        dir.scale_assign(1.0 / norm);
        let analytic_dd: f64 = grad.data().iter().zip(dir.data()).map(|(g, d)| g * d).sum();
        let base = store.value(id).clone();
        *work.value_mut(id) = base.zip_map(&dir, |v, d| v + step * d);
        let up = loss(&work);
        *work.value_mut(id) = base.zip_map(&dir, |v, d| v - step * d);
        let down = loss(&work);
        *work.value_mut(id) = base;
        let numeric = (up - down) / (2.0 * step);
        report.record(|| format!("{} (direction)", store.name(id)), analytic_dd, numeric);
    }
    report
}
