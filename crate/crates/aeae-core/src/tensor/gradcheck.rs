//! Central-difference gradient oracle.
//!
//! Deliberately independent of the tape's backward pass: it only calls the
//! supplied forward function, so tests can play the two routes against each
//! other.

use alloc::vec::Vec;

use super::Tensor;
use crate::{CoreError, Result};

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// element of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "finite differences need h > 0, got {}",
            h
        )));
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Elementwise `|a - b| <= abs_tol + rel_tol * max(|a|, |b|)`.
pub fn allclose(a: &[f64], b: &[f64], rel_tol: f64, abs_tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let scale = crate::math::abs(*x).max(crate::math::abs(*y));
            crate::math::abs(x - y) <= abs_tol + rel_tol * scale
        })
}
