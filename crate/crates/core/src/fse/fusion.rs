//! Feature selection and extraction: boundary-gated cross-modal fusion of the
//! visual, depth and patch streams at one decoder stage.

use candle_core::Tensor;

use super::boundary::BoundaryArtifacts;
use super::coa::{CoABlock, CoaConfig};
use crate::error::{PdfnetError, Result};
use crate::nn::ParamBuilder;
use crate::ops;

/// Outputs of one FSE pass plus every intermediate worth inspecting.
#[derive(Debug, Clone)]
pub struct FusedStageFeatures {
    pub visual: Tensor,
    pub depth: Tensor,
    pub patch: Tensor,
    pub pooled_visual: Tensor,
    pub pooled_depth: Tensor,
    pub pooled_patch: Tensor,
    /// Token-sequence CoA outputs `FN^{p*}`, `FN^{d*}`, `FN^{v1*}`, `FN^{v2*}`.
    pub fn_patch: Tensor,
    pub fn_depth: Tensor,
    pub fn_visual1: Tensor,
    pub fn_visual2: Tensor,
    pub artifacts: BoundaryArtifacts,
}

/// The four CoA blocks of one stage.
#[derive(Clone)]
pub struct FseBlock {
    pub patch_attn: CoABlock,
    pub depth_attn: CoABlock,
    pub visual_patch_attn: CoABlock,
    pub visual_depth_attn: CoABlock,
}

impl FseBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, zero_init: bool) -> Result<Self> {
        let cfg = CoaConfig {
            zero_init,
            ..CoaConfig::new(dim, dim, heads)
        };
        Ok(Self {
            patch_attn: CoABlock::new(&mut pb.pp("coa_p"), cfg)?,
            depth_attn: CoABlock::new(&mut pb.pp("coa_d"), cfg)?,
            visual_patch_attn: CoABlock::new(&mut pb.pp("coa_v1"), cfg)?,
            visual_depth_attn: CoABlock::new(&mut pb.pp("coa_v2"), cfg)?,
        })
    }
}

/// Token grid used for the pooled streams at a stage of size `h×w`.
pub fn token_grid(h: usize, w: usize, token_res: usize, grid: usize) -> Result<(usize, usize)> {
    let (th, tw) = (token_res.min(h), token_res.min(w));
    if th == 0 || tw == 0 || !h.is_multiple_of(th) || !w.is_multiple_of(tw) || th % grid != 0 || tw % grid != 0 {
        return Err(PdfnetError::shape(format!(
            "stage {h}x{w} cannot be pooled to {th}x{tw} tokens aligned with a {grid}x{grid} patch grid"
        )));
    }
    Ok((th, tw))
}

/// Multiplies pooled patch features by `1 + Bd`, broadcasting each patch score
/// over the tokens that patch produced.
pub fn gate_patch_tokens(pooled_patch: &Tensor, patch_scores: &Tensor, grid: usize) -> Result<Tensor> {
    let (b, _c, th, tw) = pooled_patch.dims4()?;
    if patch_scores.dims() != [b, grid * grid] {
        return Err(PdfnetError::shape(format!(
            "patch scores {:?} do not match batch {b} with grid {grid}",
            patch_scores.dims()
        )));
    }
    let per_token = patch_scores
        .reshape((b, 1, grid, grid))?
        .upsample_nearest2d(th, tw)?;
    Ok(pooled_patch.broadcast_mul(&(per_token + 1.0)?)?)
}

/// One FSE pass.
///
/// All three streams must share the shape `B×C×h×w`. `prev_pred` is the
/// previous stage's prediction at any resolution (it is resized here); `None`
/// selects the deepest-stage bootstrap. The residual updates add the CoA
/// increments (output minus query), so zero-initialized blocks leave the
/// three streams untouched.
pub fn fse_forward(
    block: &FseBlock,
    visual: &Tensor,
    depth: &Tensor,
    patch: &Tensor,
    prev_pred: Option<&Tensor>,
    grid: usize,
    tau: f64,
    token_res: usize,
) -> Result<FusedStageFeatures> {
    ops::ensure_same_shape(visual, depth, "fse depth stream")?;
    ops::ensure_same_shape(visual, patch, "fse patch stream")?;
    let (b, _c, h, w) = visual.dims4()?;

    let artifacts = match prev_pred {
        Some(p) => {
            let p = ops::resize_bilinear(p, h, w)?;
            BoundaryArtifacts::compute(&p, grid, tau)?
        }
        None => BoundaryArtifacts::bootstrap(b, h, w, grid, tau, visual)?,
    };
    let (th, tw) = token_grid(h, w, token_res, artifacts.grid)?;

    let pooled_visual = ops::area_downsample(visual, th, tw)?;
    let pooled_depth = ops::area_downsample(depth, th, tw)?;
    let pooled_patch = ops::area_downsample(patch, th, tw)?;
    let integrity = ops::area_downsample(&artifacts.integrity, th, tw)?;

    let query_patch = gate_patch_tokens(&pooled_patch, &artifacts.patch_scores, artifacts.grid)?;
    let query_depth = pooled_depth.broadcast_mul(&(integrity + 1.0)?)?;

    let tok_v = ops::to_tokens(&pooled_visual)?;
    let ctx_vd = Tensor::cat(&[&tok_v, &ops::to_tokens(&pooled_depth)?], 1)?;
    let ctx_vp = Tensor::cat(&[&tok_v, &ops::to_tokens(&pooled_patch)?], 1)?;

    let q_patch = ops::to_tokens(&query_patch)?;
    let q_depth = ops::to_tokens(&query_depth)?;
    let fn_patch = block.patch_attn.forward(&q_patch, &ctx_vd)?;
    let fn_depth = block.depth_attn.forward(&q_depth, &ctx_vp)?;

    let visual_tokens = ops::to_tokens(visual)?;
    let fn_visual1 = block.visual_patch_attn.forward(&visual_tokens, &fn_patch)?;
    let fn_visual2 = block.visual_depth_attn.forward(&fn_visual1, &fn_depth)?;

    let delta_v = ops::from_tokens(&(&fn_visual2 - &visual_tokens)?, h, w)?;
    let delta_p = ops::from_tokens(&(&fn_patch - &q_patch)?, th, tw)?;
    let delta_d = ops::from_tokens(&(&fn_depth - &q_depth)?, th, tw)?;

    Ok(FusedStageFeatures {
        visual: (visual + delta_v)?,
        patch: (patch + ops::resize_bilinear(&delta_p, h, w)?)?,
        depth: (depth + ops::resize_bilinear(&delta_d, h, w)?)?,
        pooled_visual,
        pooled_depth,
        pooled_patch,
        fn_patch,
        fn_depth,
        fn_visual1,
        fn_visual2,
        artifacts,
    })
}
