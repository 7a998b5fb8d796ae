//! Deterministic synthetic triplets for desk-scale training and tests.
//!
//! Each sample has a saturated foreground blob on a dull textured background.
//! Foreground depth is a constant plus Gaussian noise; background depth follows
//! `bg_mode` and is regenerated until its variance is at least ten times the
//! foreground's.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::png::{self, Plane};
use super::triplet::{sample_path, DEPTHS_DIR, IMAGES_DIR, MASKS_DIR};
use crate::error::{PdfnetError, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MAX_ATTEMPTS: u64 = 16;
const MIN_VARIANCE_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    Gradient,
    Noise,
    Textured,
}

impl fmt::Display for BackgroundMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackgroundMode::Gradient => "gradient",
            BackgroundMode::Noise => "noise",
            BackgroundMode::Textured => "textured",
        })
    }
}

impl FromStr for BackgroundMode {
    type Err = PdfnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(BackgroundMode::Gradient),
            "noise" => Ok(BackgroundMode::Noise),
            "textured" => Ok(BackgroundMode::Textured),
            other => Err(PdfnetError::Config(format!("unknown background mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub resolution: (usize, usize),
    pub fg_depth_sigma: f64,
    pub bg_mode: BackgroundMode,
    pub seed: u64,
}

/// One generated sample, before quantization to PNG.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub image: Plane,
    pub depth: Plane,
    pub mask: Plane,
    pub fg_depth: f64,
    pub attempt: u64,
}

pub fn sample_id(index: usize) -> String {
    format!("syn_{index:04}")
}

fn quantize16(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0) as f32
}

fn region_variance(depth: &[f32], mask: &[f32], fg: bool) -> f64 {
    let vals: Vec<f64> = depth
        .iter()
        .zip(mask)
        .filter(|(_, &m)| (m > 0.5) == fg)
        .map(|(&d, _)| d as f64)
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

fn draw_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
    let (hf, wf) = (h as f64, w as f64);
    let cy = rng.gen_range(0.35..0.65) * hf;
    let cx = rng.gen_range(0.35..0.65) * wf;
    let ry = rng.gen_range(0.15..0.28) * hf;
    let rx = rng.gen_range(0.15..0.28) * wf;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    // a thin bar sticking out of the blob gives the net some fine structure
    let bar_len = rng.gen_range(0.15..0.3) * wf;
    let bar_half = (wf / 64.0).max(1.0);
    let bar_dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (bs, bc) = bar_dir.sin_cos();
    let (ts, tc) = theta.sin_cos();
    let mut mask = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (tc * dx + ts * dy, -ts * dx + tc * dy);
            let in_ellipse = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
            let along = bc * dx + bs * dy;
            let across = (-bs * dx + bc * dy).abs();
            let in_bar = along >= 0.0 && along <= rx.max(ry) + bar_len && across <= bar_half;
            if in_ellipse || in_bar {
                mask[y * w + x] = 1.0;
            }
        }
    }
    mask
}

fn draw_image(rng: &mut ChaCha8Rng, mask: &[f32], h: usize, w: usize) -> Plane {
    let fg_color = [rng.gen_range(0.7..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.2..0.6)];
    let bg_base: f64 = rng.gen_range(0.3..0.5);
    let freq = rng.gen_range(2.0..6.0);
    let noise = Normal::new(0.0, 0.03).expect("std");
    let n = h * w;
    let mut data = vec![0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let stripe = 0.08 * (freq * std::f64::consts::TAU * (x as f64 / w as f64 + 0.5 * y as f64 / h as f64)).sin();
            for c in 0..3 {
                let v = if mask[i] > 0.5 {
                    fg_color[c]
                } else {
                    bg_base + stripe + 0.05 * c as f64
                };
                data[c * n + i] = (v + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Plane::new(3, h, w, data)
}

fn draw_depth(rng: &mut ChaCha8Rng, mask: &[f32], h: usize, w: usize, sigma: f64, mode: BackgroundMode) -> (Vec<f32>, f64) {
    let fg_depth = rng.gen_range(0.55..0.8);
    let fg_noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("std"));
    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ds, dc) = dir.sin_cos();
    let (fx, fy) = (rng.gen_range(2.0..5.0), rng.gen_range(2.0..5.0));
    let mut depth = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let d = if mask[i] > 0.5 {
                fg_depth + fg_noise.map(|n| n.sample(rng)).unwrap_or(0.0)
            } else {
                match mode {
                    // ramp along a random direction spanning roughly [0, 1]
                    BackgroundMode::Gradient => 0.5 + 0.7 * (dc * (u - 0.5) + ds * (v - 0.5)),
                    BackgroundMode::Noise => rng.gen_range(0.0..1.0),
                    BackgroundMode::Textured => {
                        0.5 + 0.45 * (fx * std::f64::consts::TAU * u).sin() * (fy * std::f64::consts::TAU * v).cos()
                    }
                }
            };
            depth[i] = quantize16(d);
        }
    }
    (depth, fg_depth)
}

/// Generates sample `index` of `spec` in memory.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<SyntheticSample> {
    let (h, w) = spec.resolution;
    if h < 4 || w < 4 {
        return Err(PdfnetError::shape(format!("synthetic resolution {h}x{w} too small")));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let sub = spec
            .seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add((index as u64) << 8)
            .wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let mask = draw_mask(&mut rng, h, w);
        let fg_pixels = mask.iter().filter(|&&m| m > 0.5).count();
        if fg_pixels == 0 || fg_pixels == h * w {
            continue;
        }
        let image = draw_image(&mut rng, &mask, h, w);
        let (depth, fg_depth) = draw_depth(&mut rng, &mask, h, w, spec.fg_depth_sigma, spec.bg_mode);
        let var_fg = region_variance(&depth, &mask, true);
        let var_bg = region_variance(&depth, &mask, false);
        if var_bg < MIN_VARIANCE_RATIO * var_fg || var_bg == 0.0 {
            continue;
        }
        return Ok(SyntheticSample {
            id: sample_id(index),
            image,
            depth: Plane::new(1, h, w, depth),
            mask: Plane::new(1, h, w, mask),
            fg_depth,
            attempt,
        });
    }
    Err(PdfnetError::Data(format!(
        "could not reach a {MIN_VARIANCE_RATIO}x background/foreground depth variance ratio for sample {index} \
         (fg_depth_sigma={} too large?)",
        spec.fg_depth_sigma
    )))
}

/// Writes `spec.n` triplets plus a `manifest.tsv` (one `id<TAB>params` line per sample).
pub fn make_synthetic_dataset(root: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    if spec.n == 0 {
        return Err(PdfnetError::Config("synthetic dataset needs n >= 1".into()));
    }
    for dir in [IMAGES_DIR, DEPTHS_DIR, MASKS_DIR] {
        let p = root.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| PdfnetError::io(&p, e))?;
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let mut manifest = std::fs::File::create(&manifest_path).map_err(|e| PdfnetError::io(&manifest_path, e))?;
    for index in 0..spec.n {
        let s = generate_sample(spec, index)?;
        png::write_rgb8(&sample_path(root, IMAGES_DIR, &s.id), &s.image)?;
        png::write_gray16(&sample_path(root, DEPTHS_DIR, &s.id), &s.depth)?;
        png::write_gray8(&sample_path(root, MASKS_DIR, &s.id), &s.mask)?;
        writeln!(
            manifest,
            "{}\tseed={};index={};attempt={};resolution={}x{};fg_depth={:.6};fg_depth_sigma={};bg_mode={}",
            s.id, spec.seed, index, s.attempt, spec.resolution.0, spec.resolution.1, s.fg_depth, spec.fg_depth_sigma, spec.bg_mode
        )
        .map_err(|e| PdfnetError::io(&manifest_path, e))?;
    }
    Ok(root.to_path_buf())
}

/// Parses a manifest back into `(id, params)` pairs.
pub fn read_manifest(root: &Path) -> Result<Vec<(String, String)>> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| PdfnetError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| PdfnetError::Data(format!("malformed manifest line {l:?}")))
        })
        .collect()
}
