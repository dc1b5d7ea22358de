use serde::{Deserialize, Serialize};

use super::ParamSet;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Worst-entry comparison of analytic and numeric gradients for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameter: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradients currently stored in `params` against central
/// differences `(f(x+h) - f(x-h)) / 2h` of `loss_fn`, entry by entry.
///
/// `loss_fn` must be deterministic: it is re-evaluated twice per entry and
/// any run-to-run variation shows up directly as gradient error. Every
/// parameter value is restored before returning.
pub fn finite_difference_gradcheck<F>(params: &mut ParamSet, h: f64, mut loss_fn: F) -> Vec<GradCheckReport>
where
    F: FnMut(&ParamSet) -> f64,
{
    finite_difference_gradcheck_terms(params, h, |p| vec![loss_fn(p)])
}

/// Like [`finite_difference_gradcheck`] for a loss given as a sum of terms.
///
/// Differences are taken term by term before summing, so terms a parameter
/// does not touch cancel exactly instead of contributing rounding noise.
/// This matters for entries whose true gradient is far below the loss
/// magnitude times machine epsilon over `h`.
pub fn finite_difference_gradcheck_terms<F>(params: &mut ParamSet, h: f64, mut loss_fn: F) -> Vec<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Vec<f64>,
{
    let mut reports = Vec::with_capacity(params.len());
    for id in params.ids().collect::<Vec<_>>() {
        let n = params.get(id).value.len();
        let mut report = GradCheckReport {
            parameter: params.get(id).id.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..n {
            let original = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = original + h;
            let plus = loss_fn(params);
            params.get_mut(id).value.data_mut()[k] = original - h;
            let minus = loss_fn(params);
            params.get_mut(id).value.data_mut()[k] = original;
            assert_eq!(plus.len(), minus.len(), "loss term count changed under perturbation");

            let numeric = plus.iter().zip(&minus).map(|(a, b)| a - b).sum::<f64>() / (2.0 * h);
            let analytic = params.get(id).grad.data()[k];
            let err = relative_error(analytic, numeric);
            if k == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    reports
}
