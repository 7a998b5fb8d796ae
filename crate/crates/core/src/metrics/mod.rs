//! Evaluation metrics for dichotomous segmentation, computed in double
//! precision on plain slices.
//!
//! Predictions are continuous maps in [0, 1]; ground truth is a boolean mask.
//! The `reference` module holds slow, literal implementations used as oracles
//! by the self-test and the test suites.

pub mod depth_variance;
pub mod evaluate;
pub mod fmeasure;
pub mod reference;
pub mod structure;
pub mod weighted;

pub use depth_variance::{depth_variance, DepthVariance, DepthVarianceReport};
pub use evaluate::{evaluate_directory, evaluate_maps, EvalOptions, Evaluation, MapPair, MetricReport, SampleMetrics};
pub use fmeasure::{f_beta, f_measure_curve, FCurve, F_BETA2, THRESHOLD_COUNT};
pub use structure::{e_measure, s_measure, S_ALPHA};
pub use weighted::{nearest_foreground, weighted_f_measure, WF_BETA2};

use crate::error::{PdfnetError, Result};

/// A prediction map paired with its binary ground truth, both row-major.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub pred: &'a [f64],
    pub gt: &'a [bool],
    pub height: usize,
    pub width: usize,
}

impl<'a> Sample<'a> {
    /// Checks sizes and that every prediction is a finite value in [0, 1].
    pub fn new(pred: &'a [f64], gt: &'a [bool], height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(PdfnetError::EmptyInput(format!("{height}x{width} map")));
        }
        if pred.len() != height * width || gt.len() != height * width {
            return Err(PdfnetError::shape(format!(
                "{height}x{width} map needs {} values, got prediction {} and mask {}",
                height * width,
                pred.len(),
                gt.len()
            )));
        }
        if let Some(i) = pred.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(PdfnetError::Data(format!("prediction value {} at {i} is outside [0, 1]", pred[i])));
        }
        Ok(Self {
            pred,
            gt,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.gt.iter().filter(|&&g| g).count()
    }
}

/// Mean absolute error between prediction and mask.
pub fn mae(s: &Sample) -> f64 {
    let total: f64 = s
        .pred
        .iter()
        .zip(s.gt)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    total / s.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_extremes() {
        let gt = [true, false, true, false];
        let same = [1.0, 0.0, 1.0, 0.0];
        let inv = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(mae(&Sample::new(&same, &gt, 2, 2).unwrap()), 0.0);
        assert_eq!(mae(&Sample::new(&inv, &gt, 2, 2).unwrap()), 1.0);
    }

    #[test]
    fn rejects_out_of_range_and_size_mismatch() {
        let gt = [true, false];
        assert!(matches!(Sample::new(&[0.5, 1.5], &gt, 1, 2), Err(PdfnetError::Data(_))));
        assert!(matches!(Sample::new(&[0.5, f64::NAN], &gt, 1, 2), Err(PdfnetError::Data(_))));
        assert!(matches!(Sample::new(&[0.5], &gt, 1, 2), Err(PdfnetError::Shape(_))));
        assert!(matches!(Sample::new(&[], &[], 0, 0), Err(PdfnetError::EmptyInput(_))));
    }
}
