//! Central-difference verification of recorded gradients.
//!
//! The checked map is recorded once, then replayed at full `f64` precision
//! with one coordinate of the probe point nudged at a time. Replaying the
//! *recorded* program (instead of calling the map again) has two effects
//! that matter:
//!
//! - no `f32` storage rounding enters the difference quotient, so the
//!   comparison is meaningful at the 1e-3 tolerance the tests pin;
//! - any data-dependent constants captured at record time (e.g. hard routing
//!   masks snapped from scores) stay frozen, which is exactly the function
//!   the straight-through gradient claims to differentiate.

use crate::error::{DyError, Result};

use super::kernels::widen;
use super::tape::Tape;
use super::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug)]
pub struct FdReport {
    /// max over coordinates of |analytic - central| / (|central| + 1e-8).
    pub max_rel_err: f64,
    /// Coordinate attaining the max.
    pub worst_coord: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
}

/// Floor added to |central difference| in the relative-error denominator.
pub const FD_DENOMINATOR_FLOOR: f64 = 1e-8;

/// Record `build(tape, point)` once, then compare its reverse-mode gradient
/// with central differences of the replayed program at step `eps`.
///
/// `build` must produce a scalar that depends on the tape; the probe point is
/// handed to it already marked as a gradient leaf.
pub fn finite_difference_check<F>(build: F, point: &Tensor, eps: f64) -> Result<FdReport>
where
    F: FnOnce(&Tape, &Tensor) -> Result<Tensor>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(DyError::invalid("finite_difference_check: eps must be positive"));
    }
    let tape = Tape::grad();
    let tracked = point.clone().with_requires_grad(true);
    let loss = build(&tape, &tracked)?;
    if loss.numel() != 1 {
        return Err(DyError::invalid(format!(
            "finite_difference_check: map must produce a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let record = tape.finish();
    let loss_idx = record.node_of(&loss)?;
    let grads = record.reverse_accumulate(&loss)?;
    let analytic: Vec<f32> = grads
        .get(&tracked)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let leaf = record.param_leaf_of(&tracked);

    let base = widen(point.data());
    let mut numeric = vec![0.0f64; point.numel()];
    if let Some(leaf_idx) = leaf {
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + eps;
            let up = record.replay_f64(loss_idx, Some((leaf_idx, &probe)))?[0];
            probe[i] = base[i] - eps;
            let down = record.replay_f64(loss_idx, Some((leaf_idx, &probe)))?[0];
            probe[i] = base[i];
            numeric[i] = (up - down) / (2.0 * eps);
        }
    }

    let mut max_rel_err = 0.0;
    let mut worst_coord = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a as f64 - n).abs() / (n.abs() + FD_DENOMINATOR_FLOOR);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(FdReport {
        max_rel_err,
        worst_coord,
        analytic,
        numeric,
    })
}
