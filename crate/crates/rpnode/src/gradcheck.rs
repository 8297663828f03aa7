//! Finite-difference gradient checking against analytic gradients. Lives in
//! the library (not just test code) so integration tests and binaries can
//! verify gradients on real model graphs.

/// Central-difference gradient of a scalar function at `x`. The step for each
/// coordinate is `eps * max(1, |x_i|)`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = eps * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst per-coordinate relative error between two gradients. Coordinates
/// where both magnitudes are below `floor` are compared against `floor`
/// instead, so noise around zero does not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
