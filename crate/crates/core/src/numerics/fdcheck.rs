//! Central finite-difference oracle for analytic gradients.
//!
//! Evaluates the loss closure directly on perturbed parameters and never
//! touches the graph's adjoints, so it checks `backward` independently.

use super::graph::{Gradients, ParamStore};

#[derive(Debug, Clone)]
pub struct FdMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<FdMismatch>,
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Magnitude below which gradients are compared on an absolute scale.
    pub floor: f64,
    /// Cap on checked coordinates per tensor; `None` checks all.
    pub max_per_param: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_per_param: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grads` against central differences of `loss` at `store`.
///
/// `store` is perturbed in place and restored bitwise before returning.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    grads: &Gradients<f64>,
    opts: FdOptions,
    loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> FdReport {
    check_gradients_where(store, grads, opts, |_| true, loss)
}

/// Like [`check_gradients`], restricted to parameters whose name passes `keep`.
pub fn check_gradients_where(
    store: &mut ParamStore<f64>,
    grads: &Gradients<f64>,
    opts: FdOptions,
    keep: impl Fn(&str) -> bool,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> FdReport {
    let mut report = FdReport::default();
    let ids: Vec<_> = store.ids().filter(|&id| keep(store.name(id))).collect();
    for id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_per_param {
            Some(cap) if n > cap => (0..cap).map(|k| k * n / cap).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = loss(store);
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(analytic, numeric, opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(FdMismatch {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    report
}
