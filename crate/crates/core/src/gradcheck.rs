//! Central finite-difference check of analytic gradients.

use crate::error::Result;
use crate::model::Differentiable;

/// Coordinates whose analytic and numeric derivatives are both below this
/// magnitude are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares every coordinate of the analytic gradient against
/// `(L(θ + h e_i) - L(θ - h e_i)) / 2h`.
pub fn check_gradient<M: Differentiable>(model: &M, sample: &M::Sample, h: f64) -> Result<GradCheck> {
    let analytic = model.grad(sample)?;
    let mut probe = model.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..analytic.dim() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = probe.loss(sample)?;
        probe.params_mut()[i] = orig - h;
        let down = probe.loss(sample)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(worst)
}
