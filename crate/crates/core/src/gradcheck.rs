//! Central-difference gradient checking against the analytic gradients
//! held in a [`ParamStore`].

use crate::error::{Error, Result};
use crate::param::ParamStore;

/// Worst coordinate found by [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares every coordinate of `params[*].grad` (which the caller has
/// filled with analytic gradients) against a central difference of
/// `loss_fn`, returning the maximum of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `loss_fn` is evaluated twice at the unperturbed point first; any
/// difference between those two values is reported as an inconsistency.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &mut ParamStore,
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let a = loss_fn(params)?;
    let b = loss_fn(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Inconsistency(format!(
            "two evaluations at the same point gave {a} and {b}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).value.len() {
            let original = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = original + step;
            let plus = loss_fn(params);
            params.get_mut(id).value.data_mut()[k] = original - step;
            let minus = loss_fn(params);
            params.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let analytic = params.get(id).grad.data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
