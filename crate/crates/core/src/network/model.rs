//! Full forward graph: encoder, FSE refinement decoder, depth decoder and the
//! final full-resolution merging heads.

use candle_core::{DType, Device, Tensor, Var};

use super::backbone::{Encoder, Pyramid, Pyramids};
use super::config::NetworkConfig;
use crate::data::DepthTriplet;
use crate::error::{PdfnetError, Result};
use crate::fse::{fse_forward, BoundaryArtifacts, FseBlock};
use crate::nn::{Conv2d, Init, ParamBuilder, ParamStore, RmsNorm};
use crate::ops;

const HE: Init = Init::Normal { gain: std::f64::consts::SQRT_2 };
const UNIT: Init = Init::Normal { gain: 1.0 };

/// Per-call switches used by ablations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Replace the depth stream entering the decoder by zeros.
    pub visual_only: bool,
    /// Fuse shallow encoder features while upsampling to full resolution;
    /// when off the merging heads only upsample bilinearly.
    pub fuse_shallow: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            visual_only: false,
            fuse_shallow: true,
        }
    }
}

/// Every output of one forward pass. Stage vectors run coarse to fine
/// (index 0 is stage 5 at 1/64, index 4 is stage 1 at 1/4).
#[derive(Debug, Clone)]
pub struct PdfnetOutputs {
    pub stage_logits: Vec<Tensor>,
    pub stage_predictions: Vec<Tensor>,
    pub final_logit: Tensor,
    pub final_prediction: Tensor,
    pub stage_depth_logits: Vec<Tensor>,
    pub stage_depths: Vec<Tensor>,
    pub final_depth_logit: Tensor,
    pub final_depth: Tensor,
    pub decoder_states: Vec<Tensor>,
    pub boundary: Vec<BoundaryArtifacts>,
}

#[derive(Clone)]
struct DecoderStage {
    lat_visual: Conv2d,
    lat_depth: Conv2d,
    lat_patch: Conv2d,
    depth_gate: Var,
    fse: FseBlock,
    merge: Conv2d,
    head: Conv2d,
}

#[derive(Clone)]
struct DepthStage {
    lat: Conv2d,
    conv1: Conv2d,
    norm1: RmsNorm,
    conv2: Conv2d,
    norm2: RmsNorm,
    head: Conv2d,
}

/// Two ×2 upsample-and-fuse steps from 1/4 to full resolution.
#[derive(Clone)]
struct MergeHead {
    reduce: Conv2d,
    half_skip: Conv2d,
    half_mix: Conv2d,
    full_skip: Conv2d,
    full_mix: Conv2d,
    head: Conv2d,
}

impl MergeHead {
    fn new(pb: &mut ParamBuilder<'_>, state_ch: usize, stem_ch: usize, in_ch: usize, m: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(&mut pb.pp("reduce"), state_ch + 1, m, 1, 1, UNIT)?,
            half_skip: Conv2d::new(&mut pb.pp("half_skip"), stem_ch, m, 1, 1, UNIT)?,
            half_mix: Conv2d::new(&mut pb.pp("half_mix"), m, m, 3, 1, HE)?,
            full_skip: Conv2d::new(&mut pb.pp("full_skip"), in_ch, m, 3, 1, UNIT)?,
            full_mix: Conv2d::new(&mut pb.pp("full_mix"), m, m, 3, 1, HE)?,
            head: Conv2d::new(&mut pb.pp("head"), m, 1, 3, 1, UNIT)?,
        })
    }

    fn forward(&self, state: &Tensor, logit: &Tensor, stem: &Tensor, raw: &Tensor, fuse: bool) -> Result<Tensor> {
        let x = self.reduce.forward(&Tensor::cat(&[state, logit], 1)?)?;
        let mut x = ops::upsample2x(&x)?;
        if fuse {
            x = (x + self.half_skip.forward(stem)?)?;
        }
        let x = self.half_mix.forward(&x)?.silu()?;
        let mut x = ops::upsample2x(&x)?;
        if fuse {
            x = (x + self.full_skip.forward(raw)?)?;
        }
        let x = self.full_mix.forward(&x)?.silu()?;
        self.head.forward(&x)
    }
}

pub struct Pdfnet {
    cfg: NetworkConfig,
    store: ParamStore,
    encoder: Encoder,
    stages: Vec<DecoderStage>,
    depth_stages: Vec<DepthStage>,
    merge_mask: MergeHead,
    merge_depth: MergeHead,
}

impl Pdfnet {
    pub fn new(cfg: NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let dch = cfg.decoder_channels;
        let main = cfg.backbone.clone();
        let patch_cfg = cfg.patch_backbone();
        let mut main_ch = main.channels().to_vec();
        main_ch.push(main_ch[3]);
        let mut patch_ch = if cfg.share_patch_encoder { main.channels() } else { patch_cfg.channels() }.to_vec();
        patch_ch.push(patch_ch[3]);

        let (encoder, stages, depth_stages, merge_mask, merge_depth) = {
            let mut root = store.root();
            let patch_opt = if cfg.share_patch_encoder { None } else { Some(&patch_cfg) };
            let encoder = Encoder::new(&mut root.pp("encoder"), &main, patch_opt)?;
            let mut stages = Vec::new();
            let mut depth_stages = Vec::new();
            // built coarse to fine so that index 0 is stage 5
            for s in (0..5).rev() {
                let mut pb = root.pp(&format!("decoder.stage{}", s + 1));
                stages.push(DecoderStage {
                    lat_visual: Conv2d::new(&mut pb.pp("lat_visual"), main_ch[s], dch, 1, 1, UNIT)?,
                    lat_depth: Conv2d::new(&mut pb.pp("lat_depth"), main_ch[s], dch, 1, 1, UNIT)?,
                    lat_patch: Conv2d::new(&mut pb.pp("lat_patch"), patch_ch[s], dch, 1, 1, UNIT)?,
                    depth_gate: pb.param("depth_gate", &[1], 1, Init::Const(cfg.depth_gate_init))?,
                    fse: FseBlock::new(&mut pb.pp("fse"), dch, cfg.head_count, cfg.zero_init_coa)?,
                    merge: Conv2d::new(&mut pb.pp("merge"), dch, dch, 3, 1, HE)?,
                    head: Conv2d::new(&mut pb.pp("head"), dch, 1, 3, 1, UNIT)?,
                });
                let mut pb = root.pp(&format!("depth_decoder.stage{}", s + 1));
                depth_stages.push(DepthStage {
                    lat: Conv2d::new(&mut pb.pp("lat"), main_ch[s], dch, 1, 1, UNIT)?,
                    conv1: Conv2d::new(&mut pb.pp("conv1"), dch, dch, 3, 1, HE)?,
                    norm1: RmsNorm::channels(&mut pb.pp("norm1"), dch)?,
                    conv2: Conv2d::new(&mut pb.pp("conv2"), dch, dch, 3, 1, HE)?,
                    norm2: RmsNorm::channels(&mut pb.pp("norm2"), dch)?,
                    head: Conv2d::new(&mut pb.pp("head"), dch, 1, 3, 1, UNIT)?,
                });
            }
            let stem_ch = main.stem_channels();
            let m = cfg.merge_channels;
            let merge_mask = MergeHead::new(&mut root.pp("merge_mask"), dch, stem_ch, 3, m)?;
            let merge_depth = MergeHead::new(&mut root.pp("merge_depth"), dch, stem_ch, 1, m)?;
            (encoder, stages, depth_stages, merge_mask, merge_depth)
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            stages,
            depth_stages,
            merge_mask,
            merge_depth,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn encode(&self, image: &Tensor, depth: &Tensor, g: usize) -> Result<Pyramids> {
        let (b, c, h, w) = image.dims4()?;
        if c != 3 || depth.dims() != [b, 1, h, w] {
            return Err(PdfnetError::shape(format!(
                "encode expects B×3×H×W image and B×1×H×W depth, got {:?} / {:?}",
                image.dims(),
                depth.dims()
            )));
        }
        let unit = 32 * g;
        if h % unit != 0 || w % unit != 0 {
            return Err(PdfnetError::shape(format!("input {h}x{w} must be divisible by 32*g = {unit}")));
        }
        Ok(Pyramids {
            visual: self.encoder.encode_visual(image)?,
            depth: self.encoder.encode_depth(depth)?,
            patch: self.encoder.encode_patches(image, g).map_err(|e| e.in_stage("patch encoder"))?,
        })
    }

    /// Mask decoder. Returns `(logits, states, boundary artifacts)`, coarse to fine.
    pub fn decode(&self, pyr: &Pyramids, opts: ForwardOptions) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<BoundaryArtifacts>)> {
        let mut logits: Vec<Tensor> = Vec::with_capacity(5);
        let mut states: Vec<Tensor> = Vec::with_capacity(5);
        let mut artifacts = Vec::with_capacity(5);
        for (k, st) in self.stages.iter().enumerate() {
            let s = 4 - k;
            let ctx = format!("decoder stage {}", s + 1);
            let fv = &pyr.visual.stages[s];
            let (_, _, h, w) = fv.dims4()?;
            let mut v = st.lat_visual.forward(fv)?;
            if let Some(prev) = states.last() {
                v = (v + ops::resize_bilinear(prev, h, w)?)?;
            }
            let d = st.lat_depth.forward(&pyr.depth.stages[s])?;
            let d = if opts.visual_only {
                d.zeros_like()?
            } else {
                d.broadcast_mul(st.depth_gate.as_tensor())?
            };
            let p = st.lat_patch.forward(&pyr.patch.stages[s])?;
            let prev_pred = logits.last().map(ops::sigmoid).transpose()?;
            let fused = fse_forward(&st.fse, &v, &d, &p, prev_pred.as_ref(), self.cfg.grid, self.cfg.tau, self.cfg.token_res)
                .map_err(|e| e.in_stage(&ctx))?;
            let merged = ((&fused.visual + &fused.patch)? + &fused.depth)?;
            let state = st.merge.forward(&merged)?.silu()?;
            logits.push(st.head.forward(&state)?);
            states.push(state);
            artifacts.push(fused.artifacts);
        }
        Ok((logits, states, artifacts))
    }

    /// Depth decoder. Consumes depth-branch features and the mask decoder
    /// states; returns `(logits, states)`, coarse to fine.
    pub fn depth_refine(&self, depth: &Pyramid, decoder_states: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        if decoder_states.len() != 5 {
            return Err(PdfnetError::shape(format!("expected 5 decoder states, got {}", decoder_states.len())));
        }
        let mut logits = Vec::with_capacity(5);
        let mut states: Vec<Tensor> = Vec::with_capacity(5);
        for (k, st) in self.depth_stages.iter().enumerate() {
            let s = 4 - k;
            let (_, _, h, w) = decoder_states[k].dims4()?;
            let mut x = (st.lat.forward(&depth.stages[s])? + &decoder_states[k])?;
            if let Some(prev) = states.last() {
                x = (x + ops::resize_bilinear(prev, h, w)?)?;
            }
            let x = st.norm1.forward(&st.conv1.forward(&x)?)?.silu()?;
            let x = st.norm2.forward(&st.conv2.forward(&x)?)?.silu()?;
            logits.push(st.head.forward(&x)?);
            states.push(x);
        }
        Ok((logits, states))
    }

    /// Final mask logit at input resolution from the stage-1 state and logit.
    pub fn merge_final(&self, state1: &Tensor, logit1: &Tensor, visual: &Pyramid, image: &Tensor, fuse_shallow: bool) -> Result<Tensor> {
        self.merge_mask.forward(state1, logit1, &visual.stem, image, fuse_shallow)
    }

    pub fn merge_final_depth(&self, state1: &Tensor, logit1: &Tensor, depth_pyr: &Pyramid, depth: &Tensor, fuse_shallow: bool) -> Result<Tensor> {
        self.merge_depth.forward(state1, logit1, &depth_pyr.stem, depth, fuse_shallow)
    }

    pub fn forward(&self, image: &Tensor, depth: &Tensor, opts: ForwardOptions) -> Result<PdfnetOutputs> {
        let pyr = self.encode(image, depth, self.cfg.grid)?;
        let (stage_logits, decoder_states, boundary) = self.decode(&pyr, opts)?;
        let (stage_depth_logits, depth_states) = self.depth_refine(&pyr.depth, &decoder_states)?;
        let final_logit = self
            .merge_final(&decoder_states[4], &stage_logits[4], &pyr.visual, image, opts.fuse_shallow)
            .map_err(|e| e.in_stage("mask merge"))?;
        let final_depth_logit = self
            .merge_final_depth(&depth_states[4], &stage_depth_logits[4], &pyr.depth, depth, opts.fuse_shallow)
            .map_err(|e| e.in_stage("depth merge"))?;
        let sig = |v: &[Tensor]| v.iter().map(ops::sigmoid).collect::<Result<Vec<_>>>();
        Ok(PdfnetOutputs {
            stage_predictions: sig(&stage_logits)?,
            stage_depths: sig(&stage_depth_logits)?,
            final_prediction: ops::sigmoid(&final_logit)?,
            final_depth: ops::sigmoid(&final_depth_logit)?,
            stage_logits,
            final_logit,
            stage_depth_logits,
            final_depth_logit,
            decoder_states,
            boundary,
        })
    }

    pub fn forward_triplet(&self, t: &DepthTriplet, opts: ForwardOptions) -> Result<PdfnetOutputs> {
        let t = t.to_dtype(self.dtype())?;
        self.forward(&t.image, &t.depth, opts)
    }
}
