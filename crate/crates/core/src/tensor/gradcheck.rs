//! Finite-difference gradient verification at 64-bit precision.

use super::{Tape, Tensor, TensorError};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per-coordinate relative errors,
    /// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
    pub coordinate_errors: Vec<f64>,
    /// Largest relative error.
    pub max_error: f64,
    /// Whether every coordinate passed the tolerance.
    pub pass: bool,
}

/// Checks the reverse-mode gradient of a scalar-valued function against
/// central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// `f` receives a fresh tape and the input tensor (already recorded as a
/// differentiable leaf for the analytic pass, plain for the numeric
/// evaluations) and must return a scalar. Evaluate at a generic point
/// when `f` contains argmax/argmin-style selections: finite differences
/// assume the selection is locally constant.
pub fn grad_check<F>(
    f: F,
    x: &Tensor<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>, TensorError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let leaf = tape.param(x);
    let out = f(&mut tape, &leaf)?;
    if out.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: out.shape().to_vec(),
        });
    }
    let grads = tape.backward(&out)?;
    let analytic = grads
        .get(&leaf)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    // Numeric passes: f evaluated as a pure function, nothing recorded.
    let eval = |values: &[f64]| -> Result<f64, TensorError> {
        let probe = Tensor::from_vec(x.shape().to_vec(), values.to_vec())?;
        let mut scratch = Tape::new();
        f(&mut scratch, &probe)?.scalar()
    };

    let base = x.data().to_vec();
    let mut coordinate_errors = Vec::with_capacity(base.len());
    let mut max_error: f64 = 0.0;
    let mut perturbed = base.clone();
    for i in 0..base.len() {
        perturbed[i] = base[i] + step;
        let plus = eval(&perturbed)?;
        perturbed[i] = base[i] - step;
        let minus = eval(&perturbed)?;
        perturbed[i] = base[i];
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let err = (analytic[i] - numeric).abs() / denom;
        coordinate_errors.push(err);
        max_error = max_error.max(err);
    }

    Ok(GradCheckReport {
        coordinate_errors,
        max_error,
        pass: max_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        // f(x) = mean(x) * n is the sum; its analytic gradient is all
        // ones. The finite-difference probe carries only the rounding
        // of the two perturbed sums, about ulp/2h ~ 1e-10 relative.
        let x = Tensor::from_vec(vec![4], vec![0.5, -1.25, 2.0, 3.5]).unwrap();
        let report = grad_check(
            |tape, x| {
                let m = tape.mean_reduce(x, 0)?;
                tape.scale(&m, 4.0)
            },
            &x,
            DEFAULT_FD_STEP,
            1e-9,
        )
        .unwrap();
        assert!(report.pass, "max error {}", report.max_error);
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|tape, x| tape.scale(x, 2.0), &x, DEFAULT_FD_STEP, 1e-6).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }
}
