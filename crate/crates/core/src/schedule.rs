//! Closed-form training schedules.
//!
//! All three schedules are pure functions of `(iter, total_iters)`, so a run
//! resumed from a checkpoint reproduces thresholds and learning rates exactly.

use crate::error::{HermesError, Result};
use std::f64::consts::PI;

/// Position within a training run. Iterations are 0-based and
/// `iter == total_iters` is legal (the final-step value).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleState {
    pub iter: usize,
    pub total_iters: usize,
}

impl ScheduleState {
    pub fn new(iter: usize, total_iters: usize) -> Result<Self> {
        if total_iters == 0 {
            return Err(HermesError::InvalidSchedule(
                "total_iters must be positive".into(),
            ));
        }
        if iter > total_iters {
            return Err(HermesError::InvalidSchedule(format!(
                "iter {iter} exceeds total_iters {total_iters}"
            )));
        }
        Ok(ScheduleState { iter, total_iters })
    }

    fn progress(self) -> f64 {
        self.iter as f64 / self.total_iters as f64
    }
}

/// Uncertainty threshold: cosine anneal from `eta_max` down to `eta_min`.
///
/// kappa = eta_min + 0.5 (eta_max - eta_min) [cos(pi iter/total) + 1]
pub fn uncertainty_threshold(state: ScheduleState, eta_min: f64, eta_max: f64) -> f64 {
    eta_min + 0.5 * (eta_max - eta_min) * ((PI * state.progress()).cos() + 1.0)
}

/// Confidence threshold: grows from ~0.855 toward 0.75 + 0.25 ln 2.
///
/// tau = 0.75 + 0.25 exp(-0.5 (1 - iter/total)^2) ln 2
pub fn confidence_threshold(state: ScheduleState) -> f64 {
    let r = 1.0 - state.progress();
    0.75 + 0.25 * (-0.5 * r * r).exp() * std::f64::consts::LN_2
}

/// Polynomial learning-rate decay: lr_init (1 - iter/total)^0.9.
pub fn poly_lr(state: ScheduleState, lr_init: f64) -> f64 {
    lr_init * (1.0 - state.progress()).powf(0.9)
}
