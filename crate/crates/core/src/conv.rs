//! Convolution as `unfold` + matrix product.
//!
//! Candle's CPU convolution (and especially its backward pass) is slow for the
//! thin channel counts used here. `Unfold` writes the im2col matrix directly
//! and its backward is the matching `Fold`, so the whole layer costs two small
//! loops plus gemm calls.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{PdfnetError, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(dims: (usize, usize, usize, usize), k: usize, stride: usize, pad: usize) -> Result<Self> {
        let (b, c, h, w) = dims;
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(PdfnetError::shape(format!("kernel {k} does not fit {h}x{w} with padding {pad}")));
        }
        Ok(Self {
            b,
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Calls `f(src, dst, len)` for every run of in-bounds taps: `len` input
    /// elements starting at `src` with step `stride` map to consecutive column
    /// entries starting at `dst`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = self.ho * self.wo;
        for bc in 0..self.b * self.c {
            let src = bc * self.h * self.w;
            for ky in 0..k {
                for kx in 0..k {
                    let row = (bc * k * k + ky * k + kx) * plane;
                    // ox valid iff 0 <= ox*s + kx - p < w
                    let ox0 = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
                    let ox1 = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.wo) } else { 0 };
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ix0 = ox0 * s + kx - p;
                        f(src + iy as usize * self.w + ix0, row + oy * self.wo + ox0, ox1 - ox0);
                    }
                }
            }
        }
    }

    fn cols_len(&self) -> usize {
        self.b * self.c * self.k * self.k * self.ho * self.wo
    }
}

fn contiguous_slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv custom op expects a contiguous input"),
    }
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl Unfold {
    fn run<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let g = self.0;
        let mut cols = vec![T::zero(); g.cols_len()];
        if g.stride == 1 {
            g.for_each_run(|i, j, n| cols[j..j + n].copy_from_slice(&x[i..i + n]));
        } else {
            g.for_each_run(|i, j, n| {
                for (t, c) in cols[j..j + n].iter_mut().enumerate() {
                    *c = x[i + t * g.stride];
                }
            });
        }
        cols
    }
}

impl Fold {
    fn run<T: WithDType>(&self, cols: &[T]) -> Vec<T> {
        let g = self.0;
        let mut x = vec![T::zero(); g.b * g.c * g.h * g.w];
        g.for_each_run(|i, j, n| {
            for t in 0..n {
                x[i + t * g.stride] += cols[j + t];
            }
        });
        x
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.b, g.c * g.k * g.k, g.ho * g.wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("unfold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("fold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// `B×C×H×W` to `B×(C·k·k)×(Ho·Wo)` patch matrix with zero padding.
pub fn unfold(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(x.dims4()?, k, stride, pad)?;
    Ok(x.contiguous()?.apply_op1(Unfold(g))?)
}

/// Cross-correlation of `x` (`B×C×H×W`) with `weight` (`O×C×k×k`), zero padding `pad`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(PdfnetError::shape(format!(
            "conv weight {:?} does not match input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let wm = weight.reshape((o, c * k * k))?;
    if k == 1 && stride == 1 && pad == 0 {
        let y = wm.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        return Ok(y.reshape((b, o, h, w))?);
    }
    let g = Geometry::new((b, c, h, w), k, stride, pad)?;
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let y = wm.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, o, g.ho, g.wo))?)
}
