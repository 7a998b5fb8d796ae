//! Depth variance inside the object, in the background and over the whole map.

use serde::{Deserialize, Serialize};

use crate::error::{PdfnetError, Result};

/// Population variances of one depth map; NaN marks an empty region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthVariance {
    pub var_fg: f64,
    pub var_bg: f64,
    pub var_all: f64,
}

/// Two-pass variance about the first value, so a constant region gives exactly 0.
fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let Some(shift) = values.clone().next() else {
        return f64::NAN;
    };
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + (v - shift), n + 1));
    let mean = sum / n as f64;
    values.map(|v| (v - shift - mean).powi(2)).sum::<f64>() / n as f64
}

pub fn depth_variance(depth: &[f64], gt: &[bool]) -> Result<DepthVariance> {
    if depth.len() != gt.len() {
        return Err(PdfnetError::shape(format!("depth has {} values, mask {}", depth.len(), gt.len())));
    }
    if depth.is_empty() {
        return Err(PdfnetError::EmptyInput("depth map".into()));
    }
    let pairs = depth.iter().zip(gt);
    Ok(DepthVariance {
        var_fg: population_variance(pairs.clone().filter(|(_, &g)| g).map(|(&d, _)| d)),
        var_bg: population_variance(pairs.filter(|(_, &g)| !g).map(|(&d, _)| d)),
        var_all: population_variance(depth.iter().copied()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthVarianceReport {
    pub samples: Vec<(String, DepthVariance)>,
    /// Means over the samples where the region is non-empty.
    pub mean_fg: f64,
    pub mean_bg: f64,
    pub mean_all: f64,
    /// Share of samples with both regions present where `var_fg < var_bg`.
    pub fraction_fg_below_bg: f64,
    pub compared: usize,
}

fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl DepthVarianceReport {
    pub fn from_samples(samples: Vec<(String, DepthVariance)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(PdfnetError::EmptyInput("no samples for the depth variance report".into()));
        }
        let both: Vec<&DepthVariance> =
            samples.iter().map(|(_, v)| v).filter(|v| !v.var_fg.is_nan() && !v.var_bg.is_nan()).collect();
        let below = both.iter().filter(|v| v.var_fg < v.var_bg).count();
        let fraction_fg_below_bg = if both.is_empty() {
            f64::NAN
        } else {
            below as f64 / both.len() as f64
        };
        Ok(Self {
            mean_fg: mean_defined(samples.iter().map(|(_, v)| v.var_fg)),
            mean_bg: mean_defined(samples.iter().map(|(_, v)| v.var_bg)),
            mean_all: mean_defined(samples.iter().map(|(_, v)| v.var_all)),
            fraction_fg_below_bg,
            compared: both.len(),
            samples,
        })
    }
}
