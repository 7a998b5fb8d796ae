//! Scale-invariant logarithmic depth error.

use candle_core::Tensor;

use super::mask::sample_mean;
use crate::error::Result;
use crate::ops;

pub const SILOG_LAMBDA: f64 = 0.85;
pub const SILOG_EPS: f64 = 1e-6;
/// Added under the square root (and its root subtracted back) so the gradient
/// stays finite when prediction and target agree exactly.
pub const SILOG_SQRT_FLOOR: f64 = 1e-24;

/// Per-sample SILog, a `B` vector.
pub fn silog_per_sample(pred: &Tensor, target: &Tensor, lambda: f64) -> Result<Tensor> {
    let lp = pred.clamp(SILOG_EPS, f64::INFINITY)?.log()?;
    let lt = target.detach().clamp(SILOG_EPS, f64::INFINITY)?.log()?;
    let d = (lp - lt)?;
    let mean_sq = sample_mean(&d.sqr()?)?;
    let sq_mean = sample_mean(&d)?.sqr()?;
    let v = (mean_sq - (sq_mean * lambda)?)?.relu()?;
    Ok(((v + SILOG_SQRT_FLOOR)?.sqrt()? - SILOG_SQRT_FLOOR.sqrt())?)
}

/// `sqrt(mean(d²) − λ·mean(d)²)` with `d = log(pred) − log(target)`, per
/// sample, averaged over the batch.
pub fn silog_loss(pred: &Tensor, target: &Tensor, lambda: f64) -> Result<Tensor> {
    ops::ensure_same_shape(pred, target, "silog")?;
    ops::ensure_finite(pred, "depth prediction")?;
    ops::ensure_finite(target, "depth target")?;
    Ok(silog_per_sample(pred, target, lambda)?.mean_all()?)
}
