use candle_core::Tensor;

use crate::error::{PdfnetError, Result};

pub const VALID_GRIDS: [usize; 5] = [1, 2, 4, 8, 16];

/// `g × g` non-overlapping tiling of a `B×C×H×W` tensor.
///
/// `patches` has shape `(g·g)×B×C×(H/g)×(W/g)`; patch `k = r·g + c` covers rows
/// `r·H/g..(r+1)·H/g` and columns `c·W/g..(c+1)·W/g`.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Tensor,
    pub grid_size: usize,
    pub origin_shape: (usize, usize),
}

impl PatchGrid {
    pub fn patch_count(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Flattens the grid into a `(g·g·B)×C×h×w` batch, patch-major.
    pub fn as_batch(&self) -> Result<Tensor> {
        let (n, b, c, h, w) = self.patches.dims5()?;
        Ok(self.patches.reshape((n * b, c, h, w))?)
    }

    /// Inverse of [`PatchGrid::as_batch`] for per-patch feature maps of any size.
    pub fn from_batch(batch: &Tensor, grid_size: usize, batch_size: usize) -> Result<Self> {
        let (nb, c, h, w) = batch.dims4()?;
        if nb != grid_size * grid_size * batch_size {
            return Err(PdfnetError::shape(format!(
                "{nb} patch rows do not match grid {grid_size} with batch {batch_size}"
            )));
        }
        Ok(Self {
            patches: batch.reshape((grid_size * grid_size, batch_size, c, h, w))?,
            grid_size,
            origin_shape: (h * grid_size, w * grid_size),
        })
    }
}

fn check_grid(g: usize) -> Result<()> {
    if !VALID_GRIDS.contains(&g) {
        return Err(PdfnetError::shape(format!("grid size {g} not in {VALID_GRIDS:?}")));
    }
    Ok(())
}

pub fn partition_patches(x: &Tensor, g: usize) -> Result<PatchGrid> {
    check_grid(g)?;
    let (b, c, h, w) = x.dims4()?;
    if h % g != 0 || w % g != 0 {
        return Err(PdfnetError::shape(format!("{h}x{w} is not divisible by grid {g}")));
    }
    let (ph, pw) = (h / g, w / g);
    // (B, C, gr, ph, gc, pw) -> (gr, gc, B, C, ph, pw)
    let t = x
        .reshape(vec![b, c, g, ph, g, pw])?
        .permute(vec![2, 4, 0, 1, 3, 5])?
        .contiguous()?
        .reshape((g * g, b, c, ph, pw))?;
    Ok(PatchGrid {
        patches: t,
        grid_size: g,
        origin_shape: (h, w),
    })
}

/// Stitches patches back together; the output is `B×C×(g·h)×(g·w)` for patches of size `h×w`.
pub fn reassemble_patches(grid: &PatchGrid) -> Result<Tensor> {
    let g = grid.grid_size;
    let (n, b, c, ph, pw) = grid
        .patches
        .dims5()
        .map_err(|_| PdfnetError::shape(format!("patch tensor must be 5-D, got {:?}", grid.patches.dims())))?;
    if n != g * g {
        return Err(PdfnetError::shape(format!("{n} patches do not form a {g}x{g} grid")));
    }
    let t = grid
        .patches
        .reshape(vec![g, g, b, c, ph, pw])?
        .permute(vec![2, 3, 0, 4, 1, 5])?
        .contiguous()?
        .reshape((b, c, g * ph, g * pw))?;
    Ok(t)
}

/// Reassembles from an explicit list of per-patch tensors (row-major order).
pub fn reassemble_list(patches: &[Tensor], g: usize) -> Result<Tensor> {
    if patches.len() != g * g {
        return Err(PdfnetError::shape(format!("{} patches do not form a {g}x{g} grid", patches.len())));
    }
    let first = patches[0].dims().to_vec();
    if patches.iter().any(|p| p.dims() != first.as_slice()) {
        return Err(PdfnetError::shape("inconsistent patch shapes"));
    }
    let rows: Vec<Tensor> = patches
        .chunks(g)
        .map(|row| Tensor::cat(row, 3))
        .collect::<candle_core::Result<_>>()?;
    Ok(Tensor::cat(&rows, 2)?)
}
