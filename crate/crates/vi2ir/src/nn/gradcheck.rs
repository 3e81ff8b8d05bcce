//! Central finite-difference utilities used by the numeric test suites.

/// Numerically differentiate `f` at `x` with central differences.
/// `x` is restored to its original contents before returning.
pub fn central_diff(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64, h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(x);
        x[i] = orig - h;
        let fm = f(x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Maximum elementwise relative error between analytic and numeric
/// gradients. Elements where both magnitudes are below `floor` are treated
/// as matching zeros.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
