//! Residual convolution pyramid used for the visual, depth and patch branches.

use candle_core::Tensor;

use super::config::BackboneConfig;
use crate::data::{partition_patches, PatchGrid};
use crate::error::Result;
use crate::nn::{Conv2d, Init, ParamBuilder, RmsNorm};

const HE: Init = Init::Normal { gain: std::f64::consts::SQRT_2 };

/// Two stride-2 convolutions: input to 1/2 (kept as the shallow feature) then 1/4.
#[derive(Clone)]
pub struct Stem {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Stem {
    pub fn new(pb: &mut ParamBuilder<'_>, in_ch: usize, cfg: &BackboneConfig) -> Result<Self> {
        let mid = cfg.stem_channels();
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), in_ch, mid, 3, 2, HE)?,
            conv2: Conv2d::new(&mut pb.pp("conv2"), mid, cfg.channels()[0], 3, 2, HE)?,
        })
    }

    /// Returns `(half, quarter)` resolution features.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let half = self.conv1.forward(x)?.silu()?;
        let quarter = self.conv2.forward(&half)?.silu()?;
        Ok((half, quarter))
    }
}

#[derive(Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm: RmsNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder<'_>, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), ch, ch, 3, 1, HE)?,
            norm: RmsNorm::channels(&mut pb.pp("norm"), ch)?,
            conv2: Conv2d::new(&mut pb.pp("conv2"), ch, ch, 3, 1, Init::Normal { gain: 0.5 })?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.conv1.forward(x)?)?.silu()?;
        Ok((x + self.conv2.forward(&y)?)?)
    }
}

/// Stages 1..4 on top of a stem output at 1/4 resolution.
#[derive(Clone)]
pub struct BackboneBody {
    downs: Vec<Option<Conv2d>>,
    blocks: Vec<Vec<ResBlock>>,
}

impl BackboneBody {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        let ch = cfg.channels();
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..4 {
            let mut spb = pb.pp(&format!("stage{}", s + 1));
            downs.push(if s == 0 {
                None
            } else {
                Some(Conv2d::new(&mut spb.pp("down"), ch[s - 1], ch[s], 3, 2, HE)?)
            });
            let stage = (0..cfg.block_depths[s])
                .map(|i| ResBlock::new(&mut spb.pp(&format!("block{i}")), ch[s]))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(stage);
        }
        Ok(Self { downs, blocks })
    }

    pub fn forward(&self, quarter: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = quarter.clone();
        let mut out = Vec::with_capacity(4);
        for (down, stage) in self.downs.iter().zip(&self.blocks) {
            if let Some(d) = down {
                x = d.forward(&x)?.silu()?;
            }
            for b in stage {
                x = b.forward(&x)?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Builds the 1/64 stage-5 map: each of stages 1..4 is average-pooled to 1/32,
/// brought to 1/64 by a strided 3×3 convolution, summed, then mixed by two 3×3
/// convolutions.
#[derive(Clone)]
pub struct CrossScaleFusion {
    projs: Vec<Conv2d>,
    mix1: Conv2d,
    mix2: Conv2d,
}

impl CrossScaleFusion {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig) -> Result<Self> {
        let ch = cfg.channels();
        let out = ch[3];
        let projs = (0..4)
            .map(|s| Conv2d::new(&mut pb.pp(&format!("proj{}", s + 1)), ch[s], out, 3, 2, HE))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projs,
            mix1: Conv2d::new(&mut pb.pp("mix1"), out, out, 3, 1, HE)?,
            mix2: Conv2d::new(&mut pb.pp("mix2"), out, out, 3, 1, Init::Normal { gain: 1.0 })?,
        })
    }

    pub fn forward(&self, stages: &[Tensor]) -> Result<Tensor> {
        let (_, _, h4, w4) = stages[3].dims4()?;
        let mut acc: Option<Tensor> = None;
        for (x, proj) in stages.iter().zip(&self.projs) {
            let (_, _, h, w) = x.dims4()?;
            let (kh, kw) = (h / h4, w / w4);
            let pooled = if kh > 1 || kw > 1 { x.avg_pool2d((kh, kw))? } else { x.clone() };
            let y = proj.forward(&pooled)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        let x = acc.expect("four stages").silu()?;
        let x = self.mix1.forward(&x)?.silu()?;
        self.mix2.forward(&x)
    }
}

/// Multi-scale features of one branch: the 1/2 stem map plus stages 1..5.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub stem: Tensor,
    pub stages: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Pyramids {
    pub visual: Pyramid,
    pub depth: Pyramid,
    pub patch: Pyramid,
}

/// Three-branch encoder. The visual and depth branches share the stage body and
/// differ only in their stems; the patch branch has its own (lighter) stem and
/// body unless sharing is requested.
#[derive(Clone)]
pub struct Encoder {
    rgb_stem: Stem,
    depth_stem: Stem,
    body: BackboneBody,
    patch_net: Option<(Stem, BackboneBody)>,
    fuse_visual: CrossScaleFusion,
    fuse_depth: CrossScaleFusion,
    fuse_patch: CrossScaleFusion,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder<'_>, main: &BackboneConfig, patch: Option<&BackboneConfig>) -> Result<Self> {
        let patch_cfg = patch.unwrap_or(main);
        Ok(Self {
            rgb_stem: Stem::new(&mut pb.pp("stem_rgb"), 3, main)?,
            depth_stem: Stem::new(&mut pb.pp("stem_depth"), 1, main)?,
            body: BackboneBody::new(&mut pb.pp("body"), main)?,
            patch_net: match patch {
                Some(cfg) => Some((
                    Stem::new(&mut pb.pp("patch_stem"), 3, cfg)?,
                    BackboneBody::new(&mut pb.pp("patch_body"), cfg)?,
                )),
                None => None,
            },
            fuse_visual: CrossScaleFusion::new(&mut pb.pp("s5_visual"), main)?,
            fuse_depth: CrossScaleFusion::new(&mut pb.pp("s5_depth"), main)?,
            fuse_patch: CrossScaleFusion::new(&mut pb.pp("s5_patch"), patch_cfg)?,
        })
    }

    fn branch(stem: &Stem, body: &BackboneBody, fuse: &CrossScaleFusion, x: &Tensor) -> Result<Pyramid> {
        let (half, quarter) = stem.forward(x)?;
        let mut stages = body.forward(&quarter)?;
        stages.push(fuse.forward(&stages)?);
        Ok(Pyramid { stem: half, stages })
    }

    pub fn encode_visual(&self, image: &Tensor) -> Result<Pyramid> {
        Self::branch(&self.rgb_stem, &self.body, &self.fuse_visual, image)
    }

    pub fn encode_depth(&self, depth: &Tensor) -> Result<Pyramid> {
        Self::branch(&self.depth_stem, &self.body, &self.fuse_depth, depth)
    }

    /// Runs the patch encoder on all `g²` patches as one batch and stitches each
    /// stage back into a full-image map.
    pub fn encode_patches(&self, image: &Tensor, g: usize) -> Result<Pyramid> {
        let b = image.dims4()?.0;
        let grid = partition_patches(image, g)?;
        let (stem, body) = match &self.patch_net {
            Some((s, bd)) => (s, bd),
            None => (&self.rgb_stem, &self.body),
        };
        let (half, quarter) = stem.forward(&grid.as_batch()?)?;
        let restitch = |t: &Tensor| -> Result<Tensor> {
            crate::data::reassemble_patches(&PatchGrid::from_batch(t, g, b)?)
        };
        let mut stages = body
            .forward(&quarter)?
            .iter()
            .map(restitch)
            .collect::<Result<Vec<_>>>()?;
        stages.push(self.fuse_patch.forward(&stages)?);
        Ok(Pyramid {
            stem: restitch(&half)?,
            stages,
        })
    }
}
