//! Structure measure (object and region similarity) and enhanced-alignment
//! measure.

use super::Sample;

pub const S_ALPHA: f64 = 0.5;

/// Mean and `N−1`-normalized variance; a single value has zero spread.
fn mean_and_spread(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    let var = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
    (mean, var, n)
}

fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mean, var, n) = mean_and_spread(values);
    if n == 0 {
        return 0.0;
    }
    2.0 * mean / (mean * mean + 1.0 + var.sqrt() + f64::EPSILON)
}

fn object_score(s: &Sample) -> f64 {
    let pairs = s.pred.iter().zip(s.gt);
    let fg = object_similarity(pairs.clone().filter(|(_, &g)| g).map(|(&p, _)| p));
    let bg = object_similarity(pairs.filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p));
    let u = s.foreground_count() as f64 / s.len() as f64;
    u * fg + (1.0 - u) * bg
}

/// Split point `(col, row)`: the rounded foreground centroid plus one, so the
/// top-left block covers rows `< row` and columns `< col`.
pub fn split_point(s: &Sample) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in s.gt.iter().enumerate().filter(|(_, &g)| g) {
        sx += (i % s.width) as f64;
        sy += (i / s.width) as f64;
        n += 1;
    }
    if n == 0 {
        let half = |v: usize| (v as f64 / 2.0).round_ties_even() as usize;
        return (half(s.width), half(s.height));
    }
    let col = (sx / n as f64).round_ties_even() as usize + 1;
    let row = (sy / n as f64).round_ties_even() as usize + 1;
    (col, row)
}

/// SSIM of one rectangular block, with `N−1+eps` normalized moments.
fn block_ssim(s: &Sample, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let n = rows.len() * cols.len();
    if n == 0 {
        return 0.0;
    }
    let at = |y: usize, x: usize| (s.pred[y * s.width + x], if s.gt[y * s.width + x] { 1.0 } else { 0.0 });
    let (mut sp, mut sg) = (0.0, 0.0);
    for y in rows.clone() {
        for x in cols.clone() {
            let (p, g) = at(y, x);
            sp += p;
            sg += g;
        }
    }
    let (mp, mg) = (sp / n as f64, sg / n as f64);
    let (mut vp, mut vg, mut cov) = (0.0, 0.0, 0.0);
    for y in rows {
        for x in cols.clone() {
            let (p, g) = at(y, x);
            vp += (p - mp) * (p - mp);
            vg += (g - mg) * (g - mg);
            cov += (p - mp) * (g - mg);
        }
    }
    let norm = n as f64 - 1.0 + f64::EPSILON;
    let (vp, vg, cov) = (vp / norm, vg / norm, cov / norm);
    let alpha = 4.0 * mp * mg * cov;
    let beta = (mp * mp + mg * mg) * (vp + vg);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(s: &Sample) -> f64 {
    let (col, row) = split_point(s);
    let (h, w) = (s.height, s.width);
    let area = (h * w) as f64;
    let w1 = (col * row) as f64 / area;
    let w2 = ((w - col) * row) as f64 / area;
    let w3 = (col * (h - row)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block_ssim(s, 0..row, 0..col)
        + w2 * block_ssim(s, 0..row, col..w)
        + w3 * block_ssim(s, row..h, 0..col)
        + w4 * block_ssim(s, row..h, col..w)
}

/// `α·S_object + (1−α)·S_region`, clipped at zero. An all-background mask
/// scores `1 − mean(P)` and an all-foreground mask `mean(P)`.
pub fn s_measure(s: &Sample) -> f64 {
    let fg = s.foreground_count();
    let mean_pred = s.pred.iter().sum::<f64>() / s.len() as f64;
    if fg == 0 {
        return 1.0 - mean_pred;
    }
    if fg == s.len() {
        return mean_pred;
    }
    (S_ALPHA * object_score(s) + (1.0 - S_ALPHA) * region_score(s)).max(0.0)
}

/// Adaptive binarization: `P >= min(2·mean(P), 1)`. An all-zero map stays
/// empty instead of turning fully foreground at threshold 0.
pub fn adaptive_binarize(pred: &[f64]) -> Vec<bool> {
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    let t = (2.0 * mean).min(1.0);
    pred.iter().map(|&p| p >= t && p > 0.0).collect()
}

/// Enhanced-alignment measure on the adaptively binarized prediction, averaged
/// over all `N` pixels.
pub fn e_measure(s: &Sample) -> f64 {
    let fm = adaptive_binarize(s.pred);
    let n = s.len() as f64;
    // counts[f][g] of (prediction, mask) pixel pairs
    let mut counts = [[0usize; 2]; 2];
    for (&f, &g) in fm.iter().zip(s.gt) {
        counts[f as usize][g as usize] += 1;
    }
    let fg = counts[0][1] + counts[1][1];
    let predicted = counts[1][0] + counts[1][1];
    if fg == 0 {
        return (s.len() - predicted) as f64 / n;
    }
    if fg == s.len() {
        return predicted as f64 / n;
    }
    let (mu_f, mu_g) = (predicted as f64 / n, fg as f64 / n);
    let mut total = 0.0;
    for f in 0..2 {
        for g in 0..2 {
            let (af, ag) = (f as f64 - mu_f, g as f64 - mu_g);
            let align = 2.0 * ag * af / (ag * ag + af * af + f64::EPSILON);
            total += counts[f][g] as f64 * (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| (2..6).contains(&(i / w)) && (3..7).contains(&(i % w))).collect()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = square(10, 10);
        let pred: Vec<f64> = gt.iter().map(|&g| g as u8 as f64).collect();
        let s = Sample::new(&pred, &gt, 10, 10).unwrap();
        assert!((s_measure(&s) - 1.0).abs() < 1e-12);
        assert!((e_measure(&s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_masks() {
        let pred = [0.25; 4];
        let empty = [false; 4];
        let full = [true; 4];
        assert_eq!(s_measure(&Sample::new(&pred, &empty, 2, 2).unwrap()), 0.75);
        assert_eq!(s_measure(&Sample::new(&pred, &full, 2, 2).unwrap()), 0.25);
        // mean 0.25 puts the threshold at 0.5, so nothing is predicted
        assert_eq!(e_measure(&Sample::new(&pred, &full, 2, 2).unwrap()), 0.0);
        assert_eq!(e_measure(&Sample::new(&pred, &empty, 2, 2).unwrap()), 1.0);
        assert_eq!(e_measure(&Sample::new(&[0.0; 4], &empty, 2, 2).unwrap()), 1.0);
    }

    #[test]
    fn split_point_rounds_half_to_even() {
        // foreground columns 0 and 3 give centroid column 1.5, rounded to 2
        let mut gt = vec![false; 8];
        gt[0] = true;
        gt[3] = true;
        let pred = [0.0; 8];
        assert_eq!(split_point(&Sample::new(&pred, &gt, 2, 4).unwrap()), (3, 1));
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let gt = square(10, 10);
        for c in [0.0, 0.3, 0.5, 0.9, 1.0] {
            let pred = vec![c; 100];
            let s = Sample::new(&pred, &gt, 10, 10).unwrap();
            for v in [s_measure(&s), e_measure(&s)] {
                assert!((0.0..=1.0).contains(&v), "{c}: {v}");
            }
        }
    }
}
