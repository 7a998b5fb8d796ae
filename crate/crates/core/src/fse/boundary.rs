//! Boundary-integrity separation of a previous-stage prediction.

use candle_core::{DType, Tensor};

use crate::error::{PdfnetError, Result};
use crate::ops;

pub const DEFAULT_TAU: f64 = 0.1;

/// Everything derived from one previous prediction `P_{i+1}` at stage resolution.
#[derive(Debug, Clone)]
pub struct BoundaryArtifacts {
    pub prev_prediction: Tensor,
    pub pooled: Tensor,
    /// Binary boundary map `B_i`.
    pub boundary: Tensor,
    /// Integrity map `S_i = ReLU(P − B)`.
    pub integrity: Tensor,
    /// Binary per-patch scores `Bd_i`, shape `B×g²`.
    pub patch_scores: Tensor,
    pub grid: usize,
    pub tau: f64,
}

/// Pooling window `(h/8, w/8)` and its replicate padding `(top, bottom, left, right)`.
pub fn pooling_geometry(h: usize, w: usize) -> Result<((usize, usize), (usize, usize, usize, usize))> {
    if h < 8 || w < 8 {
        return Err(PdfnetError::shape(format!("prediction {h}x{w} is smaller than 8x8")));
    }
    let (kh, kw) = (h / 8, w / 8);
    let (top, left) = ((kh - 1) / 2, (kw - 1) / 2);
    Ok(((kh, kw), (top, kh - 1 - top, left, kw - 1 - left)))
}

/// Stride-1 average pooling with an `(h/8, w/8)` window; replicate padding keeps the size.
///
/// The result only feeds the (non-differentiable) boundary threshold, so the
/// input is detached.
pub fn pool_prediction(p: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = p.dims4()?;
    let ((kh, kw), (t, b, l, r)) = pooling_geometry(h, w)?;
    if kh == 1 && kw == 1 {
        return Ok(p.detach());
    }
    let padded = ops::replicate_pad(&p.detach(), t, b, l, r)?;
    Ok(padded.avg_pool2d_with_stride((kh, kw), (1, 1))?)
}

/// `1` where `|P − P_p| > tau` (strict), else `0`.
pub fn boundary_map(p: &Tensor, pooled: &Tensor, tau: f64) -> Result<Tensor> {
    ops::ensure_same_shape(p, pooled, "boundary_map")?;
    let diff = (p.detach() - pooled.detach())?.abs()?;
    Ok(diff.gt(tau)?.to_dtype(p.dtype())?)
}

pub fn integrity_map(p: &Tensor, boundary: &Tensor) -> Result<Tensor> {
    ops::ensure_same_shape(p, boundary, "integrity_map")?;
    Ok((p - boundary)?.relu()?)
}

/// Per-patch flag: 1 when any element of patch `n` (row-major) is nonzero.
pub fn patch_boundary_scores(boundary: &Tensor, g: usize) -> Result<Tensor> {
    let (b, c, h, w) = boundary.dims4()?;
    if c != 1 {
        return Err(PdfnetError::shape(format!("boundary map must have one channel, got {c}")));
    }
    if g == 0 || h % g != 0 || w % g != 0 {
        return Err(PdfnetError::shape(format!("{h}x{w} boundary map is not divisible by grid {g}")));
    }
    let nonzero = boundary.detach().ne(0.0)?.to_dtype(DType::F32)?;
    let per_patch = nonzero
        .reshape(vec![b, g, h / g, g, w / g])?
        .max_keepdim(4)?
        .max_keepdim(2)?
        .reshape((b, g * g))?;
    Ok(per_patch.to_dtype(boundary.dtype())?)
}

/// Largest grid `≤ g` (halving, since `g` is a power of two) that tiles `h×w`.
pub fn effective_grid(g: usize, h: usize, w: usize) -> usize {
    let mut e = g.max(1);
    while e > 1 && (!h.is_multiple_of(e) || !w.is_multiple_of(e) || e > h || e > w) {
        e /= 2;
    }
    e
}

impl BoundaryArtifacts {
    /// Runs the full separation on a prediction already resized to stage resolution.
    ///
    /// Maps smaller than 8×8 have no valid pooling window; they fall back to a
    /// unit window, i.e. no boundary and `S = P`.
    pub fn compute(prev_prediction: &Tensor, g: usize, tau: f64) -> Result<Self> {
        let (_, _, h, w) = prev_prediction.dims4()?;
        let pooled = if h >= 8 && w >= 8 {
            pool_prediction(prev_prediction)?
        } else {
            prev_prediction.detach()
        };
        let boundary = boundary_map(prev_prediction, &pooled, tau)?;
        let integrity = integrity_map(prev_prediction, &boundary)?;
        let grid = effective_grid(g, h, w);
        let patch_scores = patch_boundary_scores(&boundary, grid)?;
        Ok(Self {
            prev_prediction: prev_prediction.clone(),
            pooled,
            boundary,
            integrity,
            patch_scores,
            grid,
            tau,
        })
    }

    /// Deepest-stage stand-in when no previous prediction exists: every patch
    /// selected (`Bd = 1`) and a pass-through integrity map (`S = 1`).
    pub fn bootstrap(b: usize, h: usize, w: usize, g: usize, tau: f64, like: &Tensor) -> Result<Self> {
        let (dtype, dev) = (like.dtype(), like.device());
        let ones = Tensor::ones((b, 1, h, w), dtype, dev)?;
        let grid = effective_grid(g, h, w);
        Ok(Self {
            prev_prediction: ones.clone(),
            pooled: ones.clone(),
            boundary: Tensor::zeros((b, 1, h, w), dtype, dev)?,
            integrity: ones,
            patch_scores: Tensor::ones((b, grid * grid), dtype, dev)?,
            grid,
            tau,
        })
    }
}
