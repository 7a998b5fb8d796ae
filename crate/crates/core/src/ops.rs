//! Differentiable tensor helpers shared by the network and the losses.
//!
//! Everything here is composed from primitive candle ops so that reverse-mode
//! gradients are available; in particular bilinear resizing is expressed as two
//! matrix products because the built-in kernel has no backward pass.

use candle_core::{DType, Tensor, D};

use crate::error::{PdfnetError, Result};

/// Interpolation matrix of shape `out × inp` for 1-D linear resampling with
/// half-pixel centers (align-corners off).
pub fn linear_interp_matrix(inp: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Computes `Mh · X · Mwᵀ` for every `H×W` plane of a `B×C×H×W` tensor, where
/// `mh` is `h×H` and `mw` is `w×W` (both row-major).
pub fn apply_separable(x: &Tensor, mh: &[f64], h: usize, mw: &[f64], w: usize) -> Result<Tensor> {
    let (b, c, in_h, in_w) = x.dims4()?;
    if mh.len() != h * in_h || mw.len() != w * in_w {
        return Err(PdfnetError::shape(format!(
            "separable operator sizes do not match {in_h}x{in_w} -> {h}x{w}"
        )));
    }
    let (dtype, device) = (x.dtype(), x.device());
    let aw = Tensor::from_slice(mw, (w, in_w), device)?.to_dtype(dtype)?.t()?;
    // width pass: (B·C·H, W) @ (W, w)
    let y = x.reshape((b * c * in_h, in_w))?.matmul(&aw)?;
    // height pass on the transposed layout: (B·C·w, H) @ (H, h)
    let ah = Tensor::from_slice(mh, (h, in_h), device)?.to_dtype(dtype)?.t()?;
    let y = y
        .reshape((b * c, in_h, w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * w, in_h))?
        .matmul(&ah)?;
    let y = y.reshape((b * c, w, h))?.transpose(1, 2)?.contiguous()?;
    Ok(y.reshape((b, c, h, w))?)
}

/// Bilinear resize of a `B×C×H×W` tensor to `h×w`.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, in_h, in_w) = x.dims4()?;
    if in_h == h && in_w == w {
        return Ok(x.clone());
    }
    apply_separable(x, &linear_interp_matrix(in_h, h), h, &linear_interp_matrix(in_w, w), w)
}

/// `n×n` matrix applying a centered odd-length 1-D filter with zero padding.
pub fn band_matrix(n: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut m = vec![0.0; n * n];
    for i in 0..n as isize {
        for j in (i - r).max(0)..(i + r + 1).min(n as isize) {
            m[i as usize * n + j as usize] = taps[(j - i + r) as usize];
        }
    }
    m
}

/// Same-size separable filtering with zero padding (the 2-D kernel is `taps ⊗ taps`).
pub fn filter_separable(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    apply_separable(x, &band_matrix(h, taps), h, &band_matrix(w, taps), w)
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Doubles the spatial size with bilinear interpolation.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

/// Area-average downsampling by an integer factor; identity when sizes match.
pub fn area_downsample(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, in_h, in_w) = x.dims4()?;
    if in_h == h && in_w == w {
        return Ok(x.clone());
    }
    if h == 0 || w == 0 || in_h % h != 0 || in_w % w != 0 {
        return Err(PdfnetError::shape(format!(
            "area downsample {in_h}x{in_w} -> {h}x{w} needs integer factors"
        )));
    }
    Ok(x.avg_pool2d((in_h / h, in_w / w))?)
}

/// Area downsampling followed by re-binarization at 0.5, for mask targets.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let pooled = area_downsample(mask, h, w)?;
    Ok(pooled.ge(0.5)?.to_dtype(mask.dtype())?)
}

/// Edge-replicating padding on both spatial axes of a 4-D tensor.
pub fn replicate_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let x = x.pad_with_same(2, top, bottom)?;
    Ok(x.pad_with_same(3, left, right)?)
}

/// Root-mean-square normalization along the channel axis (dim 1) of `B×C×H×W`.
pub fn channel_rms_norm(x: &Tensor, scale: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    let ms = x.sqr()?.mean_keepdim(1)?;
    let normed = x.broadcast_div(&(ms + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?)
}

/// Root-mean-square normalization along the last axis.
pub fn last_dim_rms_norm(x: &Tensor, scale: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = x.broadcast_div(&(ms + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(scale)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Flattens `B×C×H×W` into a token sequence `B×(H·W)×C`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    if l != h * w {
        return Err(PdfnetError::shape(format!("{l} tokens cannot form a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Returns the tensor contents as `f64`, flattened in row-major order.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Fails with `Numerics` when any element is NaN or infinite.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let bad = to_f64_vec(x)?.iter().any(|v| !v.is_finite());
    if bad {
        return Err(PdfnetError::Numerics(format!("{what} contains non-finite values")));
    }
    Ok(())
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(PdfnetError::shape(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}
