use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Precision, Tape, Tensor, Var};
use crate::error::{Result, ScanetError};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a `±step` pass switched a ReLU/ReLU6
    /// to another linear piece, so no single derivative covers the interval.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the largest relative error. See [`finite_diff_report`].
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_report(f, inputs, step).map(|r| r.max_rel_error)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per input. If it returns a
/// non-scalar value, the output is reduced to a scalar by a fixed weighted
/// sum (weights in `[0.5, 1.5)`) so the reduction adds no rounding of its
/// own. Every input is perturbed element by element.
///
/// Both sides run on an `f64` tape: the same kernels as training, without
/// `f32` rounding noise drowning gradients that are small through cancellation.
pub fn finite_diff_report<F>(f: F, inputs: &[Tensor], step: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(ScanetError::invalid(format!("finite-difference step must be positive, got {step}")));
    }

    let mut tape = Tape::with_precision(Precision::F64);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let pattern = tape.activation_pattern();
    let n_out = tape.value(out).numel();
    let weights: Vec<f32> = if n_out == 1 {
        vec![1.0]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ca7);
        (0..n_out).map(|_| rng.gen_range(0.5f32..1.5)).collect()
    };
    tape.backward_with(out, &weights)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad_f64(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // weighted output and whether the pass stayed on the base linear pieces
    let eval = |perturbed: &[Vec<f64>]| -> Result<(f64, bool)> {
        let mut t = Tape::with_precision(Precision::F64);
        let vs = perturbed
            .iter()
            .zip(inputs)
            .map(|(x, orig)| t.constant_f64(orig.shape(), x.clone()))
            .collect::<Result<Vec<Var>>>()?;
        let o = f(&mut t, &vs)?;
        let total = t.value_f64(o).iter().zip(&weights).map(|(&v, &w)| v * w as f64).sum();
        Ok((total, t.activation_pattern() == pattern))
    };

    let h = step as f64;
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut work: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let x0 = work[i][j];
            work[i][j] = x0 + h;
            let (lp, same_p) = eval(&work)?;
            work[i][j] = x0 - h;
            let (lm, same_m) = eval(&work)?;
            work[i][j] = x0;
            if !(same_p && same_m) {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = grads[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
