//! Weighted F-measure: errors are spread by a Gaussian kernel, background
//! errors borrow the error of the nearest foreground pixel, and background
//! pixels far from the object count more.

use super::Sample;

/// β² of the weighted measure, which keeps its own convention.
pub const WF_BETA2: f64 = 1.0;
pub const WF_WINDOW: usize = 7;
pub const WF_SIGMA: f64 = 5.0;
/// Distance at which the background importance reaches 1.5.
pub const WF_HALF_DISTANCE: f64 = 5.0;

/// Euclidean distance transform towards the foreground of `gt`.
///
/// Returns, per pixel, the distance to the nearest foreground pixel and that
/// pixel's row-major index. Ties go to the smallest column, then the smallest
/// row. `None` when the mask has no foreground.
pub fn nearest_foreground(gt: &[bool], height: usize, width: usize) -> Option<(Vec<f64>, Vec<usize>)> {
    if !gt.iter().any(|&g| g) {
        return None;
    }
    // per column, the nearest foreground row (upper one on ties)
    let mut col_row: Vec<Option<usize>> = vec![None; height * width];
    for x in 0..width {
        let mut last = None;
        for y in 0..height {
            if gt[y * width + x] {
                last = Some(y);
            }
            col_row[y * width + x] = last;
        }
        let mut next = None;
        for y in (0..height).rev() {
            if gt[y * width + x] {
                next = Some(y);
            }
            let i = y * width + x;
            col_row[i] = match (col_row[i], next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }

    let mut dist = vec![0.0; height * width];
    let mut index = vec![0usize; height * width];
    let mut hull: Vec<i64> = Vec::with_capacity(width);
    // breakpoints as exact fractions (numerator, positive denominator)
    let mut starts: Vec<(i64, i64)> = Vec::with_capacity(width);
    for y in 0..height {
        let f = |x: i64| -> Option<i64> {
            col_row[y * width + x as usize].map(|r| {
                let d = r as i64 - y as i64;
                d * d
            })
        };
        hull.clear();
        starts.clear();
        for q in 0..width as i64 {
            let Some(fq) = f(q) else { continue };
            let mut start = (i64::MIN, 1);
            while let Some(&v) = hull.last() {
                let fv = f(v).expect("hull holds foreground columns");
                let s = (fq + q * q - fv - v * v, 2 * (q - v));
                let prev = *starts.last().expect("one start per hull entry");
                // drop v if q takes over no later than v did
                if prev.0 != i64::MIN && s.0 * prev.1 <= prev.0 * s.1 {
                    hull.pop();
                    starts.pop();
                } else {
                    start = s;
                    break;
                }
            }
            hull.push(q);
            starts.push(start);
        }
        let mut k = 0;
        for x in 0..width as i64 {
            // a boundary that lands exactly on x keeps the left column
            while k + 1 < hull.len() && starts[k + 1].0 < x * starts[k + 1].1 {
                k += 1;
            }
            let v = hull[k];
            let r = col_row[y * width + v as usize].expect("hull holds foreground columns");
            let (dy, dx) = (r as i64 - y as i64, x - v);
            let i = y * width + x as usize;
            dist[i] = ((dy * dy + dx * dx) as f64).sqrt();
            index[i] = r * width + v as usize;
        }
    }
    Some((dist, index))
}

/// Normalized 1-D Gaussian taps whose outer product is the 7×7 kernel.
pub fn kernel_taps() -> Vec<f64> {
    let r = (WF_WINDOW / 2) as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * WF_SIGMA * WF_SIGMA)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable correlation with zero padding.
fn blur(src: &[f64], height: usize, width: usize) -> Vec<f64> {
    let taps = kernel_taps();
    let r = (WF_WINDOW / 2) as isize;
    let mut rows = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    acc += k * src[y * width + xx as usize];
                }
            }
            rows[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    acc += k * rows[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Weighted F-measure with β² = 1. An empty mask scores 0.
pub fn weighted_f_measure(s: &Sample) -> f64 {
    let (h, w) = (s.height, s.width);
    let Some((dist, nearest)) = nearest_foreground(s.gt, h, w) else {
        return 0.0;
    };
    let err: Vec<f64> = s
        .pred
        .iter()
        .zip(s.gt)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .collect();
    let borrowed: Vec<f64> = (0..err.len()).map(|i| if s.gt[i] { err[i] } else { err[nearest[i]] }).collect();
    let spread = blur(&borrowed, h, w);
    let decay = 0.5f64.ln() / WF_HALF_DISTANCE;

    let (mut fg_err, mut bg_err, mut fg_count) = (0.0, 0.0, 0usize);
    for i in 0..err.len() {
        if s.gt[i] {
            fg_err += if spread[i] < err[i] { spread[i] } else { err[i] };
            fg_count += 1;
        } else {
            bg_err += err[i] * (2.0 - (decay * dist[i]).exp());
        }
    }
    let tp = fg_count as f64 - fg_err;
    let recall = 1.0 - fg_err / fg_count as f64;
    let precision = tp / (f64::EPSILON + tp + bg_err);
    (1.0 + WF_BETA2) * recall * precision / (f64::EPSILON + recall + WF_BETA2 * precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(gt: &[bool], h: usize, w: usize) -> (Vec<i64>, Vec<usize>) {
        let mut d2 = vec![i64::MAX; h * w];
        let mut idx = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                // column-major scan so the first strict improvement wins ties
                for c in 0..w {
                    for r in 0..h {
                        if !gt[r * w + c] {
                            continue;
                        }
                        let d = (r as i64 - y as i64).pow(2) + (c as i64 - x as i64).pow(2);
                        if d < d2[y * w + x] {
                            d2[y * w + x] = d;
                            idx[y * w + x] = r * w + c;
                        }
                    }
                }
            }
        }
        (d2, idx)
    }

    #[test]
    fn transform_matches_brute_force_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..300 {
            let (h, w) = (rng.gen_range(1..14), rng.gen_range(1..14));
            let density = [0.02, 0.1, 0.5][trial % 3];
            let mut gt: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
            if !gt.iter().any(|&g| g) {
                gt[rng.gen_range(0..h * w)] = true;
            }
            let (dist, idx) = nearest_foreground(&gt, h, w).unwrap();
            let (d2, bidx) = brute(&gt, h, w);
            for i in 0..h * w {
                assert_eq!(dist[i], (d2[i] as f64).sqrt(), "trial {trial} pixel {i}");
                assert_eq!(idx[i], bidx[i], "trial {trial} pixel {i}");
            }
        }
    }

    #[test]
    fn empty_mask_has_no_transform_and_scores_zero() {
        let gt = [false; 9];
        assert!(nearest_foreground(&gt, 3, 3).is_none());
        assert_eq!(weighted_f_measure(&Sample::new(&[0.0; 9], &gt, 3, 3).unwrap()), 0.0);
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        // object well inside the frame so the kernel never sees the padding
        let (h, w) = (20, 20);
        let gt: Vec<bool> = (0..h * w).map(|i| (6..14).contains(&(i / w)) && (5..12).contains(&(i % w))).collect();
        let pred: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
        let inv: Vec<f64> = pred.iter().map(|v| 1.0 - v).collect();
        let perfect = weighted_f_measure(&Sample::new(&pred, &gt, h, w).unwrap());
        let worst = weighted_f_measure(&Sample::new(&inv, &gt, h, w).unwrap());
        assert!((perfect - 1.0).abs() < 1e-12);
        assert!(worst.abs() < 1e-6, "{worst}");
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let t = kernel_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[6]);
        assert!(t[3] > t[2]);
    }
}
