//! Finite-difference gradient oracle.
//!
//! Central differences over a scalar-valued function of one tensor. This
//! path only ever calls the forward evaluation, so it stays independent of
//! the backward implementation it is used to check.

use super::Tensor;

/// Central-difference gradient of `f` at `x` with the given step.
pub fn finite_diff(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.raw_dim());
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

/// Largest relative error between two gradients. Entries where both are
/// below `floor` are treated as matching (relative error is meaningless at
/// the finite-difference noise floor).
pub fn max_rel_err_floor(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Largest relative error with the default noise floor (1e-6).
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    max_rel_err_floor(analytic, numeric, 1e-6)
}
