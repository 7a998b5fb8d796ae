//! Depth integrity-prior loss: a stability term weighting errors by how far
//! their depth lies from the object's mean depth, and a continuity term
//! weighting errors by the depth gradient magnitude.

use candle_core::Tensor;

use super::mask::{sample_mean, sample_sum};
use crate::error::Result;
use crate::ops;

/// Clamp applied to `P_y` before the log.
pub const PY_EPS: f64 = 1e-7;

/// Intermediate maps of the prior loss, kept for inspection.
#[derive(Debug, Clone)]
pub struct DepthPriorTerms {
    /// Masked mean depth per sample (`B`); 0 for empty masks.
    pub mu: Tensor,
    /// 1 where the mask is non-empty, 0 otherwise (`B`).
    pub valid: Tensor,
    pub diff: Tensor,
    pub p_y: Tensor,
    pub neg_log: Tensor,
    pub fp: Tensor,
    pub fn_: Tensor,
    pub grad_x: Tensor,
    pub grad_y: Tensor,
}

/// Masked mean depth per sample with the empty-mask sentinel: returns
/// `(mu, valid)` where `valid` is 0 and `mu` is 0 for an all-zero mask.
pub fn mask_mean_depth(depth: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    ops::ensure_same_shape(depth, mask, "mask_mean_depth")?;
    let area = sample_sum(mask)?.detach();
    let valid = area.gt(0.0)?.to_dtype(depth.dtype())?;
    let mu = (sample_sum(&(depth * mask)?)?.detach() / area.clamp(1.0, f64::INFINITY)?)?;
    Ok((mu, valid))
}

/// 3×3 Sobel responses `(G_x, G_y)` under replicate padding, computed as a
/// central difference along one axis smoothed by `[1, 2, 1]` along the other
/// (a constant field gives exact zeros).
pub fn sobel(depth: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = depth.dims4()?;
    let padded = ops::replicate_pad(depth, 1, 1, 1, 1)?;
    let dx = (padded.narrow(3, 2, w)? - padded.narrow(3, 0, w)?)?;
    let gx = ((dx.narrow(2, 0, h)? + (dx.narrow(2, 1, h)? * 2.0)?)? + dx.narrow(2, 2, h)?)?;
    let dy = (padded.narrow(2, 2, h)? - padded.narrow(2, 0, h)?)?;
    let gy = ((dy.narrow(3, 0, w)? + (dy.narrow(3, 1, w)? * 2.0)?)? + dy.narrow(3, 2, w)?)?;
    Ok((gx, gy))
}

pub fn depth_prior_terms(p: &Tensor, mask: &Tensor, depth: &Tensor) -> Result<DepthPriorTerms> {
    ops::ensure_same_shape(p, mask, "prior prediction/mask")?;
    ops::ensure_same_shape(p, depth, "prior prediction/depth")?;
    let depth = depth.detach();
    let (mu, valid) = mask_mean_depth(&depth, mask)?;
    let b = p.dim(0)?;
    let diff = depth.broadcast_sub(&mu.reshape((b, 1, 1, 1))?)?.sqr()?;
    let inv_p = p.affine(-1.0, 1.0)?;
    let inv_m = mask.affine(-1.0, 1.0)?;
    let p_y = ((p * mask)? + (inv_p * inv_m)?)?;
    let neg_log = p_y.clamp(PY_EPS, 1.0)?.log()?.neg()?;
    let miss = p_y.affine(-1.0, 1.0)?;
    let fp = (&miss * p)?;
    let fn_ = (&miss * mask)?;
    let (grad_x, grad_y) = sobel(&depth)?;
    Ok(DepthPriorTerms {
        mu,
        valid,
        diff,
        p_y,
        neg_log,
        fp,
        fn_,
        grad_x,
        grad_y,
    })
}

impl DepthPriorTerms {
    /// Per-sample stability loss; zero for samples with an empty mask.
    pub fn stability_per_sample(&self) -> Result<Tensor> {
        let weight = ((&self.diff * (&self.fp - &self.fn_)?)? + &self.fn_)?;
        Ok((sample_mean(&(&self.neg_log * weight)?)? * &self.valid)?)
    }

    pub fn continuity_per_sample(&self) -> Result<Tensor> {
        let edge = (self.grad_x.abs()? + self.grad_y.abs()?)?;
        sample_mean(&(&self.neg_log * edge)?)
    }
}

fn check(p: &Tensor, mask: &Tensor, depth: &Tensor) -> Result<()> {
    ops::ensure_finite(p, "prediction")?;
    ops::ensure_finite(mask, "mask")?;
    ops::ensure_finite(depth, "depth")
}

/// `l_v`, averaged over pixels then over the batch.
pub fn depth_stability_loss(p: &Tensor, mask: &Tensor, depth: &Tensor) -> Result<Tensor> {
    check(p, mask, depth)?;
    Ok(depth_prior_terms(p, mask, depth)?.stability_per_sample()?.mean_all()?)
}

/// `l_g`, averaged over pixels then over the batch.
pub fn depth_continuity_loss(p: &Tensor, mask: &Tensor, depth: &Tensor) -> Result<Tensor> {
    check(p, mask, depth)?;
    Ok(depth_prior_terms(p, mask, depth)?.continuity_per_sample()?.mean_all()?)
}

/// `l_inte = (l_v + l_g) / 2` together with the intermediate maps.
pub fn integrity_prior_loss(p: &Tensor, mask: &Tensor, depth: &Tensor) -> Result<(Tensor, DepthPriorTerms)> {
    check(p, mask, depth)?;
    let terms = depth_prior_terms(p, mask, depth)?;
    let lv = terms.stability_per_sample()?.mean_all()?;
    let lg = terms.continuity_per_sample()?.mean_all()?;
    Ok((((lv + lg)? * 0.5)?, terms))
}
