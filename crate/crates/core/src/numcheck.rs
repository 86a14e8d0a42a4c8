//! Central-finite-difference gradient verification.
//!
//! These helpers are the numeric side of every gradient check in the test
//! suites: they evaluate a scalar function twice per coordinate and never
//! touch the reverse-mode machinery, so agreement between the two routes is
//! meaningful.

/// Central differences: grad[i] ~= (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute-error escape hatch for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative error over paired gradient components.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Worst absolute deviation scaled by the gradient's own magnitude:
/// max_i |a_i - n_i| / max(max|a|, max|n|). For composite objectives the
/// per-component ratio is dominated by float cancellation on components that
/// are incidentally tiny; scaling by the vector magnitude checks what the
/// chain rule actually propagates.
pub fn norm_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
