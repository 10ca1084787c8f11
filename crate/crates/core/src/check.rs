//! Numerical gradient checking helpers.
//!
//! Central finite differences evaluated through forward passes only, kept
//! deliberately independent of the reverse-mode path in [`crate::graph`] so
//! the two can be compared against each other.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &ArrayD<f64>, step: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst relative disagreement between two gradients, with `floor` guarding
/// the denominator for near-zero entries.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn quadratic_gradient() {
        let x = ArrayD::from_shape_vec(ndarray::IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|v| v.iter().map(|t| t * t).sum(), &x, 1e-6);
        let expect = x.mapv(|v| 2.0 * v);
        assert!(max_rel_err(&g, &expect, 1e-8) < 1e-7);
    }
}
