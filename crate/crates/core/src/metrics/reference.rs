//! Slow, literal metric implementations kept as oracles for the fast paths.
//!
//! Each function follows the defining formulas pixel by pixel, with no shared
//! helpers from the main implementations beyond the [`Sample`] view.

use super::Sample;

fn label(g: bool) -> f64 {
    if g {
        1.0
    } else {
        0.0
    }
}

pub fn mae(s: &Sample) -> f64 {
    let mut total = 0.0;
    for y in 0..s.height {
        for x in 0..s.width {
            let i = y * s.width + x;
            total += (s.pred[i] - label(s.gt[i])).abs();
        }
    }
    total / (s.height * s.width) as f64
}

/// `(tp, fp, fn)` of `pred >= t` against the mask.
pub fn confusion(s: &Sample, t: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..s.pred.len() {
        match (s.pred[i] >= t, s.gt[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

/// F-measure with β² = 0.3 at threshold `k/255`, counted directly.
pub fn f_at_level(s: &Sample, k: usize) -> f64 {
    let (tp, fp, fn_) = confusion(s, k as f64 / 255.0);
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    if precision == 0.0 && recall == 0.0 {
        return 0.0;
    }
    1.3 * precision * recall / (0.3 * precision + recall)
}

pub fn f_max(s: &Sample) -> f64 {
    (0..256).map(|k| f_at_level(s, k)).fold(0.0, f64::max)
}

/// Weighted F-measure with a brute-force nearest-foreground search and a
/// direct 7×7 window sum.
pub fn weighted_f_measure(s: &Sample) -> f64 {
    let (h, w) = (s.height, s.width);
    if !s.gt.iter().any(|&g| g) {
        return 0.0;
    }
    let e: Vec<f64> = (0..h * w).map(|i| (s.pred[i] - label(s.gt[i])).abs()).collect();

    let mut dst = vec![0.0; h * w];
    let mut et = e.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if s.gt[i] {
                continue;
            }
            let mut best = (u64::MAX, 0);
            // column by column, top to bottom: first strict minimum wins
            for c in 0..w {
                for r in 0..h {
                    if s.gt[r * w + c] {
                        let d = ((r as i64 - y as i64).pow(2) + (c as i64 - x as i64).pow(2)) as u64;
                        if d < best.0 {
                            best = (d, r * w + c);
                        }
                    }
                }
            }
            dst[i] = (best.0 as f64).sqrt();
            et[i] = e[best.1];
        }
    }

    let mut kernel = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / 50.0).exp();
            ksum += *v;
        }
    }
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (a, row) in kernel.iter().enumerate() {
                for (b, k) in row.iter().enumerate() {
                    let (yy, xx) = (y as isize + a as isize - 3, x as isize + b as isize - 3);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += k / ksum * et[yy as usize * w + xx as usize];
                    }
                }
            }
            ea[y * w + x] = acc;
        }
    }

    let mut ew = vec![0.0; h * w];
    for i in 0..h * w {
        let min_e = if s.gt[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if s.gt[i] { 1.0 } else { 2.0 - (0.5f64.ln() / 5.0 * dst[i]).exp() };
        ew[i] = min_e * b;
    }
    let n_fg = s.gt.iter().filter(|&&g| g).count() as f64;
    let ew_fg: f64 = (0..h * w).filter(|&i| s.gt[i]).map(|i| ew[i]).sum();
    let ew_bg: f64 = (0..h * w).filter(|&i| !s.gt[i]).map(|i| ew[i]).sum();
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let p = tpw / (f64::EPSILON + tpw + ew_bg);
    2.0 * r * p / (f64::EPSILON + r + p)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..p.len() {
        sx += (p[i] - x).powi(2);
        sy += (g[i] - y).powi(2);
        sxy += (p[i] - x) * (g[i] - y);
    }
    let d = n - 1.0 + f64::EPSILON;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

/// Structure measure with α = 0.5, written out block by block.
pub fn s_measure(s: &Sample) -> f64 {
    let (h, w) = (s.height, s.width);
    let g: Vec<f64> = s.gt.iter().map(|&v| label(v)).collect();
    let gm = mean(&g);
    if gm == 0.0 {
        return 1.0 - mean(s.pred);
    }
    if gm == 1.0 {
        return mean(s.pred);
    }

    let fg: Vec<f64> = (0..h * w).filter(|&i| s.gt[i]).map(|i| s.pred[i]).collect();
    let bg: Vec<f64> = (0..h * w).filter(|&i| !s.gt[i]).map(|i| 1.0 - s.pred[i]).collect();
    let obj = gm * object(&fg) + (1.0 - gm) * object(&bg);

    // centroid from 1-based column and row sums
    let total: f64 = g.iter().sum();
    let mut cx = 0.0;
    for x in 0..w {
        let col: f64 = (0..h).map(|y| g[y * w + x]).sum();
        cx += (x + 1) as f64 * col;
    }
    let mut cy = 0.0;
    for y in 0..h {
        let row: f64 = (0..w).map(|x| g[y * w + x]).sum();
        cy += (y + 1) as f64 * row;
    }
    let xs = (cx / total - 1.0).round_ties_even() as usize + 1;
    let ys = (cy / total - 1.0).round_ties_even() as usize + 1;

    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> (f64, f64) {
        let mut p = Vec::new();
        let mut q = Vec::new();
        for y in r0..r1 {
            for x in c0..c1 {
                p.push(s.pred[y * w + x]);
                q.push(g[y * w + x]);
            }
        }
        let weight = p.len() as f64 / (h * w) as f64;
        let score = if p.is_empty() { 0.0 } else { ssim_block(&p, &q) };
        (weight, score)
    };
    let (w1, s1) = block(0, ys, 0, xs);
    let (w2, s2) = block(0, ys, xs, w);
    let (w3, s3) = block(ys, h, 0, xs);
    let (_, s4) = block(ys, h, xs, w);
    let w4 = 1.0 - w1 - w2 - w3;
    let region = w1 * s1 + w2 * s2 + w3 * s3 + w4 * s4;

    let q = 0.5 * obj + 0.5 * region;
    if q < 0.0 {
        0.0
    } else {
        q
    }
}

/// Enhanced-alignment measure with per-pixel alignment matrices.
pub fn e_measure(s: &Sample) -> f64 {
    let n = s.pred.len();
    let th = (2.0 * mean(s.pred)).min(1.0);
    let fm: Vec<f64> = s.pred.iter().map(|&p| if p > 0.0 && p >= th { 1.0 } else { 0.0 }).collect();
    let gt: Vec<f64> = s.gt.iter().map(|&g| label(g)).collect();
    let enhanced: Vec<f64> = if gt.iter().all(|&v| v == 0.0) {
        fm.iter().map(|v| 1.0 - v).collect()
    } else if gt.iter().all(|&v| v == 1.0) {
        fm.clone()
    } else {
        let (mf, mg) = (mean(&fm), mean(&gt));
        (0..n)
            .map(|i| {
                let (af, ag) = (fm[i] - mf, gt[i] - mg);
                let align = 2.0 * (ag * af) / (ag * ag + af * af + f64::EPSILON);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n as f64
}
