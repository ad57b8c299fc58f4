//! Central finite differences, the independent oracle for gradient checks.
//!
//! Deliberately knows nothing about the tape: it perturbs raw arrays and
//! re-evaluates a closure.

use ndarray::ArrayD;

use crate::scalar::Scalar;

/// Numerical gradient of `f` at `x0` by central differences with step `eps`.
pub fn finite_difference<F: Scalar>(
    x0: &ArrayD<F>,
    eps: f64,
    mut f: impl FnMut(&ArrayD<F>) -> F,
) -> ArrayD<F> {
    let eps_f = F::from_f64c(eps);
    let two_eps = F::from_f64c(2.0 * eps);
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let orig = x.as_slice_mut().expect("standard layout")[idx];
        x.as_slice_mut().expect("standard layout")[idx] = orig + eps_f;
        let plus = f(&x);
        x.as_slice_mut().expect("standard layout")[idx] = orig - eps_f;
        let minus = f(&x);
        x.as_slice_mut().expect("standard layout")[idx] = orig;
        grad.as_slice_mut().expect("standard layout")[idx] = (plus - minus) / two_eps;
    }
    grad
}

/// Numerical gradient restricted to the given flat indices; other entries
/// stay zero. Used for spot checks on large parameter tensors.
pub fn finite_difference_slice<F: Scalar>(
    x0: &ArrayD<F>,
    indices: &[usize],
    eps: f64,
    mut f: impl FnMut(&ArrayD<F>) -> F,
) -> Vec<F> {
    let eps_f = F::from_f64c(eps);
    let two_eps = F::from_f64c(2.0 * eps);
    let mut x = x0.clone();
    indices
        .iter()
        .map(|&idx| {
            let orig = x.as_slice_mut().expect("standard layout")[idx];
            x.as_slice_mut().expect("standard layout")[idx] = orig + eps_f;
            let plus = f(&x);
            x.as_slice_mut().expect("standard layout")[idx] = orig - eps_f;
            let minus = f(&x);
            x.as_slice_mut().expect("standard layout")[idx] = orig;
            (plus - minus) / two_eps
        })
        .collect()
}
