//! Central finite-difference verification of analytic loss gradients.

use serde::Serialize;

use crate::error::Result;

use super::{LossOutput, Slot, TupleBatch};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Central-difference round-off at
/// [`FD_STEP`] is about `eps * |f| / h`, near `1e-10` for losses of order
/// ten; the floor keeps that noise under `2e-5` on components whose true
/// gradient is zero or tiny.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest [`relative_error`] between `analytic` and the central difference of
/// `f` at `x`, with the index where it occurs.
pub fn max_relative_error<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> (f64, usize)
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let err = relative_error(analytic[i], (up - down) / (2.0 * h));
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Slot and coordinate of the worst mismatch.
    #[serde(skip)]
    pub worst: Option<(Slot, usize)>,
    pub coordinates_checked: usize,
    /// Masked slots whose analytic gradient was not exactly zero.
    pub nonzero_masked_slots: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of `loss` against central differences for
/// every coordinate of every valid slot. Masked slots must carry an exactly
/// zero gradient. Failures are reported, never raised.
pub fn grad_check<F>(loss: F, batch: &TupleBatch, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&TupleBatch) -> Result<LossOutput>,
{
    let analytic = loss(batch)?;
    let mut probe = batch.clone();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut coordinates_checked = 0;
    let mut nonzero_masked_slots = 0;

    for slot in batch.slots() {
        let grad = analytic.grads.get(slot);
        if !batch.is_valid(slot) {
            if grad.iter().any(|&g| g != 0.0) {
                nonzero_masked_slots += 1;
            }
            continue;
        }
        for c in 0..batch.dim() {
            let x = batch.vector(slot)[c];
            probe.vector_mut(slot)[c] = x + FD_STEP;
            let up = loss(&probe)?.value;
            probe.vector_mut(slot)[c] = x - FD_STEP;
            let down = loss(&probe)?.value;
            probe.vector_mut(slot)[c] = x;
            let err = relative_error(grad[c], (up - down) / (2.0 * FD_STEP));
            coordinates_checked += 1;
            if err > max_rel_error {
                max_rel_error = err;
                worst = Some((slot, c));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates_checked,
        nonzero_masked_slots,
        tolerance,
        passed: max_rel_error <= tolerance && nonzero_masked_slots == 0,
    })
}
