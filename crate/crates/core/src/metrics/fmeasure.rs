//! Precision/recall/F-measure over 256 evenly spaced thresholds.

use super::Sample;

pub const THRESHOLD_COUNT: usize = 256;
/// β² of the max-F measure; values below one favour precision.
pub const F_BETA2: f64 = 0.3;

/// Threshold `k/255`; a pixel is foreground when its value is at least this.
pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// `(1+β²)·P·R / (β²·P + R)`, zero when both are zero.
pub fn f_beta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

/// Precision, recall and F from raw counts. An empty prediction has zero
/// precision; an empty mask has zero recall.
pub fn scores_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    (precision, recall, f_beta(precision, recall, F_BETA2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
}

impl FCurve {
    pub fn max(&self) -> f64 {
        self.f.iter().copied().fold(0.0, f64::max)
    }
}

/// Largest `k` with `p >= k/255`, using the same comparison as the thresholds.
fn level(p: f64) -> usize {
    let mut k = ((p * 255.0).floor() as usize).min(THRESHOLD_COUNT - 1);
    while k + 1 < THRESHOLD_COUNT && p >= threshold(k + 1) {
        k += 1;
    }
    while k > 0 && p < threshold(k) {
        k -= 1;
    }
    k
}

/// One histogram pass, then cumulative counts from the top level down.
pub fn f_measure_curve(s: &Sample) -> FCurve {
    let mut fg_hist = [0usize; THRESHOLD_COUNT];
    let mut bg_hist = [0usize; THRESHOLD_COUNT];
    for (&p, &g) in s.pred.iter().zip(s.gt) {
        let k = level(p);
        if g {
            fg_hist[k] += 1;
        } else {
            bg_hist[k] += 1;
        }
    }
    let positives = s.foreground_count();
    let mut curve = FCurve {
        precision: vec![0.0; THRESHOLD_COUNT],
        recall: vec![0.0; THRESHOLD_COUNT],
        f: vec![0.0; THRESHOLD_COUNT],
    };
    let (mut tp, mut fp) = (0, 0);
    for k in (0..THRESHOLD_COUNT).rev() {
        tp += fg_hist[k];
        fp += bg_hist[k];
        let (p, r, f) = scores_from_counts(tp, fp, positives - tp);
        curve.precision[k] = p;
        curve.recall[k] = r;
        curve.f[k] = f;
    }
    curve
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_agrees_with_threshold_comparison() {
        for k in 0..THRESHOLD_COUNT {
            let t = threshold(k);
            assert_eq!(level(t), k);
            let below = f64::from_bits(t.to_bits().saturating_sub(1));
            if k > 0 {
                assert_eq!(level(below), k - 1);
            }
        }
        assert_eq!(level(1.0), 255);
    }

    #[test]
    fn binary_match_scores_one() {
        let gt = [true, false, false, true];
        let pred = [1.0, 0.0, 0.0, 1.0];
        let c = f_measure_curve(&Sample::new(&pred, &gt, 2, 2).unwrap());
        assert_eq!(c.max(), 1.0);
        // threshold 0 marks every pixel foreground
        assert_eq!(c.precision[0], 0.5);
    }

    #[test]
    fn equal_precision_and_recall() {
        // 4 foreground pixels; prediction hits 3 and adds one false positive
        let gt = [true, true, true, true, false, false, false, false, false];
        let pred = [1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let c = f_measure_curve(&Sample::new(&pred, &gt, 3, 3).unwrap());
        assert_eq!(c.precision[128], 0.75);
        assert_eq!(c.recall[128], 0.75);
        assert!((c.f[128] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gt = [true, false];
        let c = f_measure_curve(&Sample::new(&[0.0, 0.0], &gt, 1, 2).unwrap());
        assert!(c.f[1..].iter().all(|&f| f == 0.0));
    }
}
