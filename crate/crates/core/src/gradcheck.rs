//! Central finite-difference gradient checking.
//!
//! Used throughout the test suites as the independent oracle for every
//! analytic gradient: perturb one coordinate at a time by `±step` and compare
//! the two-sided difference quotient against the tape's result.

/// Central difference gradient of `f` at `x` with the given step.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst relative error between two gradient vectors.
///
/// The denominator is floored at 1e-3 so that finite-difference noise on
/// near-zero coordinates is judged absolutely rather than blowing up the
/// ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        worst = worst.max(rel_err(a, n));
    }
    worst
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Outcome of a kink-aware gradient check.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckedGradient {
    /// Worst relative error over coordinates where the oracle is valid.
    pub worst_rel_err: f64,
    /// Coordinates skipped because the central-difference estimate itself is
    /// step-inconsistent there (a ReLU kink inside the probe interval), so no
    /// finite-difference oracle exists at that point.
    pub skipped: usize,
    pub checked: usize,
}

/// Compares an analytic gradient against central differences at `step`,
/// masking coordinates where halving the step moves the estimate by more
/// than `tol` — on a smooth function the two estimates agree to O(step^2),
/// so disagreement marks a non-differentiable point rather than a wrong
/// gradient.
pub fn check_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    tol: f64,
) -> CheckedGradient {
    assert_eq!(analytic.len(), x.len(), "gradient length mismatch");
    let coarse = central_diff(&mut f, x, step);
    let mut out = CheckedGradient::default();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let first = rel_err(analytic[i], coarse[i]);
        if first <= tol {
            out.worst_rel_err = out.worst_rel_err.max(first);
            out.checked += 1;
            continue;
        }
        // Re-estimate at half step only for suspicious coordinates.
        let orig = probe[i];
        let h = step / 2.0;
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        let fine = (plus - minus) / (2.0 * h);
        if rel_err(coarse[i], fine) > tol {
            out.skipped += 1;
            continue;
        }
        out.worst_rel_err = out.worst_rel_err.max(first);
        out.checked += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = [1.0, -2.0, 0.5];
        let g = central_diff(|v| v.iter().map(|&a| a * a).sum::<f64>(), &x, 1e-4);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_err(&expect, &g) < 1e-8);
    }
}
