//! Mask losses: boundary-weighted BCE and IoU, and SSIM.

use candle_core::Tensor;

use crate::error::Result;
use crate::ops;

pub const WEIGHT_WINDOW: usize = 31;
pub const WEIGHT_GAIN: f64 = 5.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Keeps the IoU ratio defined when both prediction and mask are empty.
pub const IOU_SMOOTH: f64 = 1e-12;

/// Per-sample mean over every non-batch axis, giving a `B` vector.
pub(crate) fn sample_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.mean(1)?)
}

pub(crate) fn sample_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(1)?)
}

/// `1 + 5·|box31(M) − M|`, where the box mean counts zero padding.
pub fn pixel_weights(mask: &Tensor) -> Result<Tensor> {
    let taps = vec![1.0 / WEIGHT_WINDOW as f64; WEIGHT_WINDOW];
    let m = mask.detach();
    let local = ops::filter_separable(&m, &taps)?;
    Ok((((local - &m)?.abs()? * WEIGHT_GAIN)? + 1.0)?.detach())
}

/// Numerically stable binary cross-entropy with logits, per pixel.
pub fn bce_with_logits(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let softplus_neg_abs = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * mask)?)? + softplus_neg_abs)?)
}

/// Per-sample weighted BCE given precomputed weights.
pub fn weighted_bce_per_sample(logits: &Tensor, mask: &Tensor, w: &Tensor) -> Result<Tensor> {
    let bce = bce_with_logits(logits, mask)?;
    Ok((sample_sum(&(bce * w)?)? / sample_sum(w)?)?)
}

pub fn weighted_iou_per_sample(p: &Tensor, mask: &Tensor, w: &Tensor) -> Result<Tensor> {
    let inter = sample_sum(&((p * mask)? * w)?)?;
    let union = sample_sum(&(((p + mask)? - (p * mask)?)? * w)?)?;
    Ok(((inter + IOU_SMOOTH)? / (union + IOU_SMOOTH)?)?.affine(-1.0, 1.0)?)
}

/// Per-sample `1 − mean SSIM`.
pub fn ssim_per_sample(p: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let taps = ops::gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let blur = |t: &Tensor| ops::filter_separable(t, &taps);
    let mu_x = blur(p)?;
    let mu_y = blur(mask)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let sxx = (blur(&p.sqr()?)? - &mu_xx)?;
    let syy = (blur(&mask.sqr()?)? - &mu_yy)?;
    let sxy = (blur(&(p * mask)?)? - &mu_xy)?;
    let num = ((mu_xy * 2.0)? + SSIM_C1)?.mul(&((sxy * 2.0)? + SSIM_C2)?)?;
    let den = ((mu_xx + mu_yy)? + SSIM_C1)?.mul(&((sxx + syy)? + SSIM_C2)?)?;
    Ok(sample_mean(&(num / den)?)?.affine(-1.0, 1.0)?)
}

fn checked(tensors: &[(&Tensor, &str)]) -> Result<()> {
    for (t, what) in tensors {
        ops::ensure_finite(t, what)?;
    }
    for (t, what) in &tensors[1..] {
        ops::ensure_same_shape(tensors[0].0, t, what)?;
    }
    Ok(())
}

/// `Σ(w·BCE)/Σw` per sample, averaged over the batch.
pub fn weighted_bce(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    checked(&[(logits, "logits"), (mask, "mask")])?;
    let w = pixel_weights(mask)?;
    Ok(weighted_bce_per_sample(logits, mask, &w)?.mean_all()?)
}

/// `1 − Σ(w·P·M)/Σ(w·(P+M−P·M))` per sample, averaged over the batch.
pub fn weighted_iou(p: &Tensor, mask: &Tensor) -> Result<Tensor> {
    checked(&[(p, "prediction"), (mask, "mask")])?;
    let w = pixel_weights(mask)?;
    Ok(weighted_iou_per_sample(p, mask, &w)?.mean_all()?)
}

/// `1 − mean SSIM` with an 11×11 Gaussian window (σ = 1.5) and zero padding.
pub fn ssim_loss(p: &Tensor, mask: &Tensor) -> Result<Tensor> {
    checked(&[(p, "prediction"), (mask, "mask")])?;
    Ok(ssim_per_sample(p, mask)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{scalar_f64, to_f64_vec};
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (0..n * n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let m = (0..n * n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        (p, m)
    }

    fn t(v: &[f64], n: usize) -> Tensor {
        Tensor::from_slice(v, (1, 1, n, n), &Device::Cpu).unwrap()
    }

    fn naive_weights(m: &[f64], n: usize) -> Vec<f64> {
        let r = (WEIGHT_WINDOW / 2) as isize;
        (0..n * n)
            .map(|k| {
                let (i, j) = ((k / n) as isize, (k % n) as isize);
                let mut s = 0.0;
                for y in i - r..=i + r {
                    for x in j - r..=j + r {
                        if y >= 0 && x >= 0 && y < n as isize && x < n as isize {
                            s += m[y as usize * n + x as usize];
                        }
                    }
                }
                1.0 + 5.0 * (s / (WEIGHT_WINDOW * WEIGHT_WINDOW) as f64 - m[k]).abs()
            })
            .collect()
    }

    #[test]
    fn constant_mask_has_unit_weights_in_interior() {
        // zero padding makes the border differ, so test a map larger than the window
        let m = Tensor::ones((1, 1, 64, 64), candle_core::DType::F64, &Device::Cpu).unwrap();
        let w = to_f64_vec(&pixel_weights(&m).unwrap()).unwrap();
        assert!((w[32 * 64 + 32] - 1.0).abs() < 1e-12);
        let z = m.zeros_like().unwrap();
        assert!(to_f64_vec(&pixel_weights(&z).unwrap()).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weighted_losses_match_naive_sums() {
        let n = 16;
        let (p, m) = random_pair(3, n);
        let w = naive_weights(&m, n);
        let logits: Vec<f64> = p.iter().map(|v| (v / (1.0 - v)).ln()).collect();
        let (mut wb, mut ws, mut inter, mut uni) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..n * n {
            let bce = -(m[k] * p[k].ln() + (1.0 - m[k]) * (1.0 - p[k]).ln());
            wb += w[k] * bce;
            ws += w[k];
            inter += w[k] * p[k] * m[k];
            uni += w[k] * (p[k] + m[k] - p[k] * m[k]);
        }
        let got_bce = scalar_f64(&weighted_bce(&t(&logits, n), &t(&m, n)).unwrap()).unwrap();
        let got_iou = scalar_f64(&weighted_iou(&t(&p, n), &t(&m, n)).unwrap()).unwrap();
        assert!((got_bce - wb / ws).abs() < 1e-10, "{got_bce} vs {}", wb / ws);
        assert!((got_iou - (1.0 - inter / uni)).abs() < 1e-10);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let n = 16;
        let (_, m) = random_pair(4, n);
        let mt = t(&m, n);
        assert_eq!(scalar_f64(&weighted_iou(&mt, &mt).unwrap()).unwrap(), 0.0);
        assert!(scalar_f64(&ssim_loss(&mt, &mt).unwrap()).unwrap().abs() < 1e-12);
        let logits = ((&mt * 2.0).unwrap() - 1.0).unwrap() * 40.0;
        assert!(scalar_f64(&weighted_bce(&logits.unwrap(), &mt).unwrap()).unwrap() < 1e-12);
    }

    fn naive_ssim(p: &[f64], m: &[f64], n: usize) -> f64 {
        let g = ops::gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        let r = (SSIM_WINDOW / 2) as isize;
        let mut total = 0.0;
        for i in 0..n as isize {
            for j in 0..n as isize {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (y, x) = (i + dy, j + dx);
                        if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
                            continue;
                        }
                        let wgt = g[(dy + r) as usize] * g[(dx + r) as usize];
                        let (a, b) = (p[y as usize * n + x as usize], m[y as usize * n + x as usize]);
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2));
            }
        }
        1.0 - total / (n * n) as f64
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        for seed in 0..3 {
            let n = 16;
            let (p, m) = random_pair(seed, n);
            let got = scalar_f64(&ssim_loss(&t(&p, n), &t(&m, n)).unwrap()).unwrap();
            assert!((got - naive_ssim(&p, &m, n)).abs() < 1e-10);
        }
    }

    #[test]
    fn inverted_mask_ssim_is_in_range() {
        let n = 16;
        let (_, m) = random_pair(8, n);
        let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
        let l = scalar_f64(&ssim_loss(&t(&inv, n), &t(&m, n)).unwrap()).unwrap();
        assert!(l > 0.0 && l <= 2.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let n = 4;
        let mut p = vec![0.5; n * n];
        p[3] = f64::NAN;
        let m = vec![0.0; n * n];
        assert!(matches!(weighted_iou(&t(&p, n), &t(&m, n)), Err(crate::PdfnetError::Numerics(_))));
    }
}
