//! Central finite-difference check of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of the scalar built by `objective` against
/// `(f(p + ε) − f(p − ε)) / 2ε` for every scalar parameter.
///
/// `objective` must be deterministic in the parameters (noise frozen).
pub fn finite_diff_check<F>(store: &ParamStore, epsilon: f64, mut objective: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, root) = objective(store)?;
    let grads = tape.backward(root);
    drop(tape);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut eval = |s: &ParamStore| -> Result<f64> {
        let (t, r) = objective(s)?;
        Ok(t.value(r).sum())
    };

    for id in store.ids() {
        let n = store.value(id).len();
        for k in 0..n {
            let original = store.value(id).as_slice().expect("standard layout")[k];
            work.value_mut(id).as_slice_mut().expect("standard layout")[k] = original + epsilon;
            let plus = eval(&work)?;
            work.value_mut(id).as_slice_mut().expect("standard layout")[k] = original - epsilon;
            let minus = eval(&work)?;
            work.value_mut(id).as_slice_mut().expect("standard layout")[k] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads
                .get(id)
                .map(|g| g.as_slice().expect("standard layout")[k])
                .unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            let err = (analytic - numeric).abs() / denom;
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
