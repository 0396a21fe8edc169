//! Central finite-difference oracle for gradient checks.
//!
//! Test code only: production paths never call this. It re-evaluates the
//! forward function at perturbed inputs, so it is independent of every
//! backward implementation it is used to verify.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function, step `h` per element.
pub fn finite_diff<F>(f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max-norm relative error of `approx` against `reference`.
pub fn max_rel_err(approx: &ArrayD<f64>, reference: &ArrayD<f64>) -> f64 {
    assert_eq!(approx.shape(), reference.shape(), "max_rel_err: shape mismatch");
    let diff = approx
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let scale = reference.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    diff / scale.max(1e-10)
}
