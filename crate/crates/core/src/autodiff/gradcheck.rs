//! Central finite-difference checks of tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients for one leaf.
#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: Var,
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `max|analytic - numeric| / max|numeric|`, or the absolute error when
    /// the numeric gradient vanishes.
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() <= self.tolerance
    }
}

/// Norm-based relative error between two gradient arrays.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Numeric gradient of the scalar `output` with respect to `leaf`.
pub fn numeric_gradient(tape: &Tape, output: Var, leaf: Var, step: f64) -> Result<Tensor> {
    let base = tape.value(leaf);
    let mut grad = Tensor::zeros(base.shape());
    let mut probe = (*base).clone();
    for i in 0..base.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = tape.evaluate_with(&[(leaf, &probe)], output)?.item();
        probe.data_mut()[i] = orig - step;
        let minus = tape.evaluate_with(&[(leaf, &probe)], output)?.item();
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares reverse-mode gradients of `output` against central differences
/// for each of `leaves`.
pub fn gradient_check(tape: &Tape, output: Var, leaves: &[Var], step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let grads = tape.backward(output)?;
    let mut out = Vec::with_capacity(leaves.len());
    for &leaf in leaves {
        let analytic = grads.wrt(leaf);
        let numeric = numeric_gradient(tape, output, leaf, step)?;
        let relative_error = relative_error(analytic.data(), numeric.data());
        out.push(LeafCheck { leaf, analytic, numeric, relative_error });
    }
    Ok(GradCheckReport { leaves: out, tolerance })
}
