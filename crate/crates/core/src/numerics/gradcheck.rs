//! Central finite-difference gradient checker.

use crate::numerics::optim::Params;
use crate::numerics::rng::SplitMix64;
use crate::numerics::tensor::{cst, Scalar};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per slot; slots smaller than this are checked
    /// exhaustively.
    pub coords_per_slot: usize,
    /// Absolute differences at or below this count as agreement; guards the
    /// relative error against gradients that are zero up to round-off. The
    /// floor is raised to the finite-difference round-off of the loss,
    /// `64 u (|L+| + |L-|) / 2ε`, when that is larger.
    pub abs_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-6, coords_per_slot: 24, abs_tol: 1e-8, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_slot: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Relative error used throughout: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradients written by `loss` against central differences.
///
/// `loss` must compute the scalar objective and accumulate its gradient into
/// the model's slots. It is invoked once for the analytic pass and twice per
/// sampled coordinate; gradients are cleared before returning.
pub fn grad_check<T, P, F>(model: &mut P, mut loss: F, opts: &GradCheckOptions) -> GradCheckReport
where
    T: Scalar,
    P: Params<T>,
    F: FnMut(&mut P) -> T,
{
    model.zero_grads();
    loss(model);
    let analytic: Vec<Vec<T>> = model.slots().iter().map(|s| s.grad.data().to_vec()).collect();
    model.zero_grads();

    let mut rng = SplitMix64::new(opts.seed);
    let mut report = GradCheckReport::default();
    let eps: T = cst(opts.epsilon);
    for (si, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let coords: Vec<usize> = if n <= opts.coords_per_slot {
            (0..n).collect()
        } else {
            (0..opts.coords_per_slot).map(|_| rng.below(n)).collect()
        };
        for idx in coords {
            let orig = model.slots()[si].value.data()[idx];
            model.slots_mut()[si].value.data_mut()[idx] = orig + eps;
            let plus = loss(model).to_f64().unwrap_or(f64::NAN);
            model.slots_mut()[si].value.data_mut()[idx] = orig - eps;
            let minus = loss(model).to_f64().unwrap_or(f64::NAN);
            model.slots_mut()[si].value.data_mut()[idx] = orig;
            model.zero_grads();

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grads[idx].to_f64().unwrap_or(f64::NAN);
            let noise = 64.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * opts.epsilon);
            let err = if (a - numeric).abs() <= opts.abs_tol.max(noise) { 0.0 } else { rel_error(a, numeric) };
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_slot = model.slots()[si].name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
