//! Inference-side commands: split evaluation, single-image prediction and the
//! depth-prior analysis.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, Checkpoint};
use super::config::RunConfig;
use super::train::TRAIN_DTYPE;
use crate::data::png::{self, Plane};
use crate::data::triplet::sample_path;
use crate::data::{list_samples, load_triplet, DepthTriplet, DEPTHS_DIR, IMAGES_DIR, MASKS_DIR};
use crate::error::{PdfnetError, Result};
use crate::losses::prior::depth_prior_terms;
use crate::metrics::{depth_variance, evaluate_directory, DepthVarianceReport, EvalOptions, Evaluation};
use crate::network::{ForwardOptions, Pdfnet};
use crate::ops;

pub const PREDICTIONS_DIR: &str = "predictions";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const VARIANCE_JSON: &str = "depth_variance.json";
pub const TERMS_CSV: &str = "terms.csv";

/// A trained network together with the configuration it was trained under.
pub struct LoadedModel {
    pub model: Pdfnet,
    pub config: RunConfig,
}

impl LoadedModel {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let model = Pdfnet::new(ck.config.network(), ck.config.seed, TRAIN_DTYPE, &Device::Cpu)?;
        ck.restore_params(model.params())?;
        Ok(Self { model, config: ck.config })
    }

    pub fn options(&self) -> ForwardOptions {
        ForwardOptions {
            visual_only: self.config.visual_only,
            fuse_shallow: self.config.fuse_shallow,
        }
    }

    /// Final mask and refined depth of one sample, both `1×1×H×W`.
    pub fn infer(&self, image: &Tensor, depth: &Tensor) -> Result<(Tensor, Tensor)> {
        let image = image.to_dtype(TRAIN_DTYPE)?;
        let depth = depth.to_dtype(TRAIN_DTYPE)?;
        let out = self.model.forward(&image, &depth, self.options())?;
        Ok((out.final_prediction.detach(), out.final_depth.detach()))
    }
}

fn plane_of(t: &Tensor) -> Result<Plane> {
    let (_, c, h, w) = t.dims4()?;
    let data = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
    Ok(Plane::new(c, h, w, data))
}

fn tensor_of(p: &Plane) -> Result<Tensor> {
    Ok(Tensor::from_vec(p.data.clone(), (1, p.channels, p.height, p.width), &Device::Cpu)?)
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(PdfnetError::NotFound(dir.to_path_buf()))
    }
}

/// Predicts every sample of `split_dir`, writes 8-bit PNGs to
/// `out_dir/predictions` and scores them against `split_dir/masks`.
///
/// Predictions are stored at the model resolution; scoring resizes them to
/// each mask. The depth-variance columns come from `split_dir/depths`.
pub fn cmd_eval(checkpoint: &Path, split_dir: &Path, out_dir: &Path, opts: &EvalOptions) -> Result<Evaluation> {
    let loaded = LoadedModel::load(checkpoint)?;
    require_dir(split_dir)?;
    let ids = list_samples(split_dir)?;
    if ids.is_empty() {
        return Err(PdfnetError::EmptyInput(format!("no samples in {}", split_dir.display())));
    }
    let pred_dir = out_dir.join(PREDICTIONS_DIR);
    std::fs::create_dir_all(&pred_dir).map_err(|e| PdfnetError::io(&pred_dir, e))?;
    for id in &ids {
        let t = load_triplet(split_dir, id, Some(loaded.config.resolution))?;
        let (mask, _) = loaded.infer(&t.image, &t.depth)?;
        png::write_gray8(&pred_dir.join(format!("{id}.png")), &plane_of(&mask)?)?;
    }
    let eval = evaluate_directory(&pred_dir, &split_dir.join(MASKS_DIR), Some(&split_dir.join(DEPTHS_DIR)), opts)?;
    eval.write_csv(&out_dir.join(METRICS_CSV))?;
    eval.write_json(&out_dir.join(METRICS_JSON))?;
    Ok(eval)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictReport {
    pub height: usize,
    pub width: usize,
    /// Reading and resizing the pseudo-depth file.
    pub depth_load_ms: f64,
    /// Forward pass only.
    pub network_ms: f64,
}

/// Single-image inference. Writes the mask as 8-bit and the refined depth as
/// 16-bit PNG, both at the input image size.
pub fn cmd_predict(checkpoint: &Path, image: &Path, depth: &Path, mask_out: &Path, depth_out: &Path) -> Result<PredictReport> {
    let loaded = LoadedModel::load(checkpoint)?;
    let (rh, rw) = loaded.config.resolution;
    let rgb = png::read_rgb(image)?;
    let t0 = Instant::now();
    let d = png::read_gray(depth)?;
    let d = png::resize_smooth(&d, rh, rw);
    let depth_load_ms = t0.elapsed().as_secs_f64() * 1e3;
    let x = tensor_of(&png::resize_smooth(&rgb, rh, rw))?.clamp(0.0, 1.0)?;
    let dt = tensor_of(&d)?.clamp(0.0, 1.0)?;
    let t1 = Instant::now();
    let (mask, refined) = loaded.infer(&x, &dt)?;
    let network_ms = t1.elapsed().as_secs_f64() * 1e3;
    let (h, w) = (rgb.height, rgb.width);
    png::write_gray8(mask_out, &png::resize_smooth(&plane_of(&mask)?, h, w))?;
    png::write_gray16(depth_out, &png::resize_smooth(&plane_of(&refined)?, h, w))?;
    Ok(PredictReport {
        height: h,
        width: w,
        depth_load_ms,
        network_ms,
    })
}

/// Where and how to dump the stability weight maps.
pub struct DumpOptions<'a> {
    pub out_dir: &'a Path,
    /// Predictions come from this model; without one the mask itself is used.
    pub checkpoint: Option<&'a Path>,
}

/// Depth variance statistics of a dataset, read from `depths/` and `masks/`
/// at native resolution. With `dump`, also writes per-sample `l_v` weight
/// maps, squared depth deviations and depth-edge strength images plus a
/// `terms.csv` with the per-sample prior losses.
pub fn cmd_analyze_prior(root: &Path, dump: Option<DumpOptions<'_>>) -> Result<DepthVarianceReport> {
    require_dir(root)?;
    let ids = if root.join(IMAGES_DIR).is_dir() {
        list_samples(root)?
    } else {
        Vec::new()
    };
    if ids.is_empty() {
        return Err(PdfnetError::EmptyInput(format!("no samples in {}", root.display())));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let (h, w, depth) = png::read_gray_f64(&sample_path(root, DEPTHS_DIR, id))?;
        let (mh, mw, mask) = png::read_gray_f64(&sample_path(root, MASKS_DIR, id))?;
        if (h, w) != (mh, mw) {
            return Err(PdfnetError::shape(format!("{id}: depth is {h}x{w} but mask is {mh}x{mw}")));
        }
        let gt: Vec<bool> = mask.iter().map(|&v| v >= 0.5).collect();
        rows.push((id.clone(), depth_variance(&depth, &gt)?));
    }
    let report = DepthVarianceReport::from_samples(rows)?;
    if let Some(d) = dump {
        dump_terms(root, &ids, &d)?;
        write_atomic(&d.out_dir.join(VARIANCE_JSON), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}

fn dump_terms(root: &Path, ids: &[String], d: &DumpOptions<'_>) -> Result<()> {
    let model = d.checkpoint.map(LoadedModel::load).transpose()?;
    std::fs::create_dir_all(d.out_dir).map_err(|e| PdfnetError::io(d.out_dir, e))?;
    let mut csv = String::from("sample_id,mu,l_v,l_g\n");
    for id in ids {
        let resolution = model.as_ref().map(|m| m.config.resolution);
        let t: DepthTriplet = load_triplet(root, id, resolution)?.to_dtype(candle_core::DType::F64)?;
        let p = match &model {
            Some(m) => m.infer(&t.image, &t.depth)?.0.to_dtype(candle_core::DType::F64)?,
            None => t.mask.clone(),
        };
        let terms = depth_prior_terms(&p, &t.mask, &t.depth_target)?;
        // the pixel weight of -log(P_y) in the stability term, within [0, 1]
        let weight = ((&terms.diff * (&terms.fp - &terms.fn_)?)? + &terms.fn_)?;
        // a Sobel response is at most 4 per axis on [0, 1] depth
        let edge = ((terms.grad_x.abs()? + terms.grad_y.abs()?)? / 8.0)?;
        png::write_gray8(&d.out_dir.join(format!("{id}_weight.png")), &plane_of(&weight)?)?;
        png::write_gray8(&d.out_dir.join(format!("{id}_diff.png")), &plane_of(&terms.diff)?)?;
        png::write_gray8(&d.out_dir.join(format!("{id}_edge.png")), &plane_of(&edge)?)?;
        let lv = ops::scalar_f64(&terms.stability_per_sample()?)?;
        let lg = ops::scalar_f64(&terms.continuity_per_sample()?)?;
        let mu = ops::scalar_f64(&terms.mu)?;
        let _ = writeln!(csv, "{id},{mu},{lv},{lg}");
    }
    write_atomic(&d.out_dir.join(TERMS_CSV), csv.as_bytes())
}
