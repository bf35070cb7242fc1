use super::Differentiable;
use crate::error::Result;
use crate::matrix::Matrix;

/// Below this magnitude the relative error falls back to the absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_params: usize,
}

/// Compares every analytic gradient entry with a central difference of step `h`.
pub fn finite_diff_check<M: Differentiable + Clone>(
    model: &M,
    inputs: &Matrix,
    labels: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grad(inputs, labels)?;
    let mut probe = model.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut max_abs_error: f64 = 0.0;
    for (j, &a) in analytic.iter().enumerate() {
        let original = probe.params()[j];
        probe.params_mut()[j] = original + h;
        let up = probe.loss(inputs, labels)?;
        probe.params_mut()[j] = original - h;
        let down = probe.loss(inputs, labels)?;
        probe.params_mut()[j] = original;
        let numeric = (up - down) / (2.0 * h);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        max_abs_error = max_abs_error.max(abs);
        max_rel_error = max_rel_error.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        n_params: analytic.len(),
    })
}
