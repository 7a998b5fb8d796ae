//! Seeded joint augmentation of image, depth and mask.
//!
//! One geometric transform (flip, rotation, crop-and-rescale) is drawn per sample
//! and applied to all three maps: bilinear sampling for image and depth, nearest
//! for the mask. Color jitter touches the image only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::png::Plane;
use super::triplet::DepthTriplet;
use crate::error::{PdfnetError, Result};

pub const MAX_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Symmetric jitter amplitude for brightness, contrast and saturation; 0 disables.
    pub jitter: f64,
    pub crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            jitter: 0.2,
            crop_scale: (0.75, 1.0),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            jitter: 0.0,
            crop_scale: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    flip: bool,
    angle: f64,
    scale: f64,
    shift: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct Jitter {
    brightness: f64,
    contrast: f64,
    saturation: f64,
}

fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Geometry, Option<Jitter>) {
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let angle = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let (lo, hi) = cfg.crop_scale;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let slack = (1.0 - scale).max(0.0) / 2.0;
    let shift = if slack > 0.0 {
        (rng.gen_range(-slack..=slack) * w as f64, rng.gen_range(-slack..=slack) * h as f64)
    } else {
        (0.0, 0.0)
    };
    let jitter = (cfg.jitter > 0.0).then(|| {
        let mut f = || rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
        Jitter {
            brightness: f(),
            contrast: f(),
            saturation: f(),
        }
    });
    (Geometry { flip, angle, scale, shift }, jitter)
}

/// Maps an output pixel center to a continuous source position.
fn source_position(geo: &Geometry, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
    let (px, py) = (px * geo.scale, py * geo.scale);
    let (s, c) = geo.angle.sin_cos();
    let (rx, ry) = (c * px - s * py, s * px + c * py);
    let mut sx = cx + rx + geo.shift.0;
    let sy = cy + ry + geo.shift.1;
    if geo.flip {
        sx = w as f64 - sx;
    }
    (sx, sy)
}

fn inside(sx: f64, sy: f64, h: usize, w: usize) -> bool {
    sx >= 0.0 && sy >= 0.0 && sx <= w as f64 && sy <= h as f64
}

fn bilinear(p: &Plane, c: usize, sx: f64, sy: f64) -> f32 {
    let fx = (sx - 0.5).clamp(0.0, (p.width - 1) as f64);
    let fy = (sy - 0.5).clamp(0.0, (p.height - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(p.width - 1), (y0 + 1).min(p.height - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let top = p.at(c, y0, x0) as f64 * (1.0 - ax) + p.at(c, y0, x1) as f64 * ax;
    let bot = p.at(c, y1, x0) as f64 * (1.0 - ax) + p.at(c, y1, x1) as f64 * ax;
    (top * (1.0 - ay) + bot * ay) as f32
}

fn nearest(p: &Plane, c: usize, sx: f64, sy: f64) -> f32 {
    let x = (sx.floor() as usize).min(p.width - 1);
    let y = (sy.floor() as usize).min(p.height - 1);
    p.at(c, y, x)
}

/// Applies `geo` to every plane; returns the number of output pixels that map inside the source.
fn warp(geo: &Geometry, planes: [&Plane; 4]) -> ([Plane; 4], usize) {
    let (h, w) = (planes[0].height, planes[0].width);
    let mut out: [Plane; 4] = planes.map(|p| Plane::new(p.channels, h, w, vec![0.0; p.channels * h * w]));
    let mut valid = 0;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_position(geo, x, y, h, w);
            if !inside(sx, sy, h, w) {
                continue;
            }
            valid += 1;
            for (k, p) in planes.iter().enumerate() {
                for c in 0..p.channels {
                    let v = if k == 3 { nearest(p, c, sx, sy) } else { bilinear(p, c, sx, sy) };
                    out[k].data[(c * h + y) * w + x] = v;
                }
            }
        }
    }
    (out, valid)
}

fn jitter_image(img: &mut Plane, j: &Jitter) {
    let n = img.height * img.width;
    let gray = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
    for v in img.data.iter_mut() {
        *v = (*v as f64 * j.brightness).clamp(0.0, 1.0) as f32;
    }
    let mean = (0..n).map(|i| gray(&img.data, i) as f64).sum::<f64>() / n as f64;
    for v in img.data.iter_mut() {
        *v = ((*v as f64 - mean) * j.contrast + mean).clamp(0.0, 1.0) as f32;
    }
    for i in 0..n {
        let g = gray(&img.data, i) as f64;
        for c in 0..3 {
            let v = &mut img.data[c * n + i];
            *v = ((*v as f64 - g) * j.saturation + g).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Augments every batch element of `t` with a transform drawn from `rng_seed`.
///
/// A draw whose warped area is empty is retried with a derived sub-seed, up to
/// [`MAX_RETRIES`] times.
pub fn augment(t: &DepthTriplet, rng_seed: u64, cfg: &AugmentConfig) -> Result<DepthTriplet> {
    let mut out = Vec::with_capacity(t.batch_size());
    for b in 0..t.batch_size() {
        let (img, depth, target, mask) = t.planes(b)?;
        let (h, w) = (img.height, img.width);
        let mut result = None;
        for attempt in 0..=MAX_RETRIES {
            let sub = rng_seed
                .wrapping_add(b as u64)
                .wrapping_add((attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let (geo, jit) = draw(cfg, &mut rng, h, w);
            let (mut warped, valid) = warp(&geo, [&img, &depth, &target, &mask]);
            if valid == 0 {
                continue;
            }
            if let Some(j) = jit {
                jitter_image(&mut warped[0], &j);
            }
            result = Some(warped);
            break;
        }
        let [img, depth, target, mask] = result.ok_or_else(|| {
            PdfnetError::Augment(format!("{}: empty valid area after {} retries", t.sample_id, MAX_RETRIES))
        })?;
        out.push(DepthTriplet::from_planes(&img, &depth, Some(&target), &mask, &t.sample_id)?);
    }
    let stacked = DepthTriplet::stack(&out)?;
    Ok(DepthTriplet {
        sample_id: t.sample_id.clone(),
        ..stacked
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;

    fn fixture() -> DepthTriplet {
        let (h, w) = (16, 12);
        let n = h * w;
        let img: Vec<f32> = (0..3 * n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let depth: Vec<f32> = (0..n).map(|i| (i % w) as f32 / w as f32).collect();
        let mask: Vec<f32> = (0..n).map(|i| if (i / w) > 4 && (i % w) < 7 { 1.0 } else { 0.0 }).collect();
        DepthTriplet::from_planes(
            &Plane::new(3, h, w, img),
            &Plane::new(1, h, w, depth),
            None,
            &Plane::new(1, h, w, mask),
            "fx",
        )
        .unwrap()
    }

    fn same(a: &DepthTriplet, b: &DepthTriplet) -> bool {
        to_f64_vec(&a.image).unwrap() == to_f64_vec(&b.image).unwrap()
            && to_f64_vec(&a.depth).unwrap() == to_f64_vec(&b.depth).unwrap()
            && to_f64_vec(&a.mask).unwrap() == to_f64_vec(&b.mask).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let t = fixture();
        let a = augment(&t, 3, &AugmentConfig::identity()).unwrap();
        assert!(same(&t, &a));
    }

    #[test]
    fn double_flip_restores_original() {
        let t = fixture();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let once = augment(&t, 11, &cfg).unwrap();
        assert!(!same(&t, &once));
        let twice = augment(&once, 11, &cfg).unwrap();
        assert!(same(&t, &twice));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let t = fixture();
        let cfg = AugmentConfig::default();
        assert!(same(&augment(&t, 42, &cfg).unwrap(), &augment(&t, 42, &cfg).unwrap()));
    }

    #[test]
    fn jitter_leaves_depth_and_mask_alone() {
        let t = fixture();
        let cfg = AugmentConfig {
            jitter: 0.2,
            ..AugmentConfig::identity()
        };
        let a = augment(&t, 5, &cfg).unwrap();
        assert_eq!(to_f64_vec(&a.depth).unwrap(), to_f64_vec(&t.depth).unwrap());
        assert_eq!(to_f64_vec(&a.mask).unwrap(), to_f64_vec(&t.mask).unwrap());
        assert_ne!(to_f64_vec(&a.image).unwrap(), to_f64_vec(&t.image).unwrap());
    }

    #[test]
    fn degenerate_crop_exhausts_retries() {
        // extreme zoom-out maps every output pixel outside the source
        let t = fixture();
        let cfg = AugmentConfig {
            crop_scale: (1000.0, 1000.0),
            ..AugmentConfig::identity()
        };
        assert!(matches!(augment(&t, 1, &cfg), Err(PdfnetError::Augment(_))));
    }

    proptest::proptest! {
        #[test]
        fn default_augmentation_keeps_mask_binary_and_shape(seed in 0u64..10_000) {
            let t = fixture();
            let a = augment(&t, seed, &AugmentConfig::default()).unwrap();
            proptest::prop_assert_eq!(a.image.dims(), t.image.dims());
            proptest::prop_assert_eq!(a.mask.dims(), t.mask.dims());
            proptest::prop_assert!(to_f64_vec(&a.mask).unwrap().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
