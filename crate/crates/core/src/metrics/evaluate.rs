//! Per-sample evaluation of prediction maps and directory-level reports.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::depth_variance::{depth_variance, DepthVariance, DepthVarianceReport};
use super::fmeasure::{f_measure_curve, FCurve, THRESHOLD_COUNT};
use super::structure::{e_measure, s_measure};
use super::weighted::weighted_f_measure;
use super::{mae, Sample};
use crate::data::png::{self, Plane};
use crate::error::{PdfnetError, Result};

pub const CSV_HEADER: &str = "sample_id,fmax,fw,em,sm,mae,var_fg,var_bg,var_all";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Threshold predictions at 0.5 before scoring.
    pub binarize: bool,
}

/// One prediction/mask pair held in memory; `depth` feeds the variance columns.
#[derive(Debug, Clone)]
pub struct MapPair {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    pub pred: Vec<f64>,
    pub gt: Vec<bool>,
    pub depth: Option<Vec<f64>>,
}

/// One CSV row. Variance columns hold NaN when no depth was given or the
/// region is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub fmax: f64,
    pub fw: f64,
    pub em: f64,
    pub sm: f64,
    pub mae: f64,
    pub var_fg: f64,
    pub var_bg: f64,
    pub var_all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Arithmetic means of the per-sample columns.
    pub f_max: f64,
    pub f_weighted: f64,
    pub e_measure: f64,
    pub s_measure: f64,
    pub mae: f64,
    /// Maximum of the sample-averaged F curve, for comparison with toolkits
    /// that report max-F that way.
    pub f_max_mean_curve: f64,
    pub samples: Vec<SampleMetrics>,
}

fn mean_of(rows: &[SampleMetrics], col: impl Fn(&SampleMetrics) -> f64) -> f64 {
    rows.iter().map(col).fold(0.0, |a, b| a + b) / rows.len() as f64
}

impl MetricReport {
    fn from_rows(samples: Vec<SampleMetrics>, curves: &[FCurve]) -> Self {
        let mut mean_curve = vec![0.0; THRESHOLD_COUNT];
        for c in curves {
            for (m, f) in mean_curve.iter_mut().zip(&c.f) {
                *m += f;
            }
        }
        let f_max_mean_curve = mean_curve.iter().map(|v| v / curves.len() as f64).fold(0.0, f64::max);
        Self {
            f_max: mean_of(&samples, |r| r.fmax),
            f_weighted: mean_of(&samples, |r| r.fw),
            e_measure: mean_of(&samples, |r| r.em),
            s_measure: mean_of(&samples, |r| r.sm),
            mae: mean_of(&samples, |r| r.mae),
            f_max_mean_curve,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub depth: Option<DepthVarianceReport>,
    /// Files without a counterpart; they are left out of every aggregate.
    pub unpaired: Vec<PathBuf>,
}

impl Evaluation {
    pub fn fully_paired(&self) -> bool {
        self.unpaired.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for r in &self.report.samples {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.sample_id, r.fmax, r.fw, r.em, r.sm, r.mae, r.var_fg, r.var_bg, r.var_all
            ));
        }
        write_atomic(path, text.as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| PdfnetError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| PdfnetError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PdfnetError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PdfnetError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PdfnetError::io(path, e))
}

fn score_pair(pair: &MapPair, opts: &EvalOptions) -> Result<(SampleMetrics, FCurve, Option<DepthVariance>)> {
    let pred: Vec<f64> = if opts.binarize {
        pair.pred.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect()
    } else {
        pair.pred.clone()
    };
    let s = Sample::new(&pred, &pair.gt, pair.height, pair.width)
        .map_err(|e| PdfnetError::Data(format!("{}: {e}", pair.sample_id)))?;
    let curve = f_measure_curve(&s);
    let var = pair.depth.as_ref().map(|d| depth_variance(d, &pair.gt)).transpose()?;
    let nan = f64::NAN;
    let row = SampleMetrics {
        sample_id: pair.sample_id.clone(),
        fmax: curve.max(),
        fw: weighted_f_measure(&s),
        em: e_measure(&s),
        sm: s_measure(&s),
        mae: mae(&s),
        var_fg: var.map_or(nan, |v| v.var_fg),
        var_bg: var.map_or(nan, |v| v.var_bg),
        var_all: var.map_or(nan, |v| v.var_all),
    };
    Ok((row, curve, var))
}

/// Scores every pair (in parallel across available cores) and aggregates by
/// the arithmetic mean, in input order.
pub fn evaluate_maps(pairs: &[MapPair], opts: &EvalOptions) -> Result<(MetricReport, Option<DepthVarianceReport>)> {
    if pairs.is_empty() {
        return Err(PdfnetError::EmptyInput("no prediction/mask pairs to evaluate".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len());
    let chunk = pairs.len().div_ceil(workers);
    let scored: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|p| score_pair(p, opts)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("metric worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(pairs.len());
    let mut curves = Vec::with_capacity(pairs.len());
    let mut variances = Vec::new();
    for item in scored {
        let (row, curve, var) = item?;
        if let Some(v) = var {
            variances.push((row.sample_id.clone(), v));
        }
        rows.push(row);
        curves.push(curve);
    }
    let depth = if variances.is_empty() {
        None
    } else {
        Some(DepthVarianceReport::from_samples(variances)?)
    };
    Ok((MetricReport::from_rows(rows, &curves), depth))
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(PdfnetError::NotFound(dir.to_path_buf()));
    }
    Ok(std::fs::read_dir(dir)
        .map_err(|e| PdfnetError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect())
}

fn resized(h: usize, w: usize, data: Vec<f64>, to: (usize, usize)) -> Vec<f64> {
    if (h, w) == to {
        return data;
    }
    let plane = Plane::new(1, h, w, data.into_iter().map(|v| v as f32).collect());
    png::resize_smooth(&plane, to.0, to.1).data.into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect()
}

/// Pairs `pred_dir/*.png` with `gt_dir/*.png` by file stem and scores them.
///
/// Masks are binarized at 0.5. Predictions (and depths, when `depth_dir` is
/// given) are resized to the mask resolution if they differ. Files without a
/// counterpart are listed in [`Evaluation::unpaired`].
pub fn evaluate_directory(
    pred_dir: &Path,
    gt_dir: &Path,
    depth_dir: Option<&Path>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    if preds.is_empty() && gts.is_empty() {
        return Err(PdfnetError::EmptyInput(format!(
            "no PNG files in {} or {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let file = |dir: &Path, id: &str| dir.join(format!("{id}.png"));
    let mut unpaired: Vec<PathBuf> = preds.difference(&gts).map(|id| file(pred_dir, id)).collect();
    unpaired.extend(gts.difference(&preds).map(|id| file(gt_dir, id)));

    let mut pairs = Vec::new();
    for id in preds.intersection(&gts) {
        let (h, w, gt) = png::read_gray_f64(&file(gt_dir, id))?;
        let (ph, pw, pred) = png::read_gray_f64(&file(pred_dir, id))?;
        let depth = match depth_dir {
            Some(dir) if file(dir, id).is_file() => {
                let (dh, dw, d) = png::read_gray_f64(&file(dir, id))?;
                Some(resized(dh, dw, d, (h, w)))
            }
            Some(dir) => {
                unpaired.push(file(dir, id));
                None
            }
            None => None,
        };
        pairs.push(MapPair {
            sample_id: id.clone(),
            height: h,
            width: w,
            pred: resized(ph, pw, pred, (h, w)),
            gt: gt.iter().map(|&v| v >= 0.5).collect(),
            depth,
        });
    }
    if pairs.is_empty() {
        return Err(PdfnetError::EmptyInput(format!(
            "no prediction in {} shares a name with a mask in {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let (report, depth) = evaluate_maps(&pairs, opts)?;
    Ok(Evaluation {
        report,
        depth,
        unpaired,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, pred: Vec<f64>, gt: Vec<bool>) -> MapPair {
        MapPair {
            sample_id: id.into(),
            height: 2,
            width: 2,
            pred,
            gt,
            depth: None,
        }
    }

    #[test]
    fn aggregates_are_plain_means() {
        let pairs = vec![
            pair("a", vec![0.9, 0.1, 0.2, 0.7], vec![true, false, false, true]),
            pair("b", vec![0.3, 0.6, 0.2, 0.1], vec![false, true, false, false]),
            pair("c", vec![0.5, 0.5, 0.5, 0.5], vec![true, true, false, false]),
        ];
        let (r, d) = evaluate_maps(&pairs, &EvalOptions::default()).unwrap();
        assert!(d.is_none());
        let m = (r.samples[0].mae + r.samples[1].mae + r.samples[2].mae) / 3.0;
        assert_eq!(r.mae, m);
        assert_eq!(r.samples.iter().map(|s| s.sample_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(r.samples[0].var_fg.is_nan());
    }

    #[test]
    fn binarize_option_thresholds_predictions() {
        let pairs = vec![pair("a", vec![0.6, 0.4, 0.4, 0.6], vec![true, false, false, true])];
        let (r, _) = evaluate_maps(&pairs, &EvalOptions { binarize: true }).unwrap();
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn empty_and_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        let (p, g) = (dir.path().join("p"), dir.path().join("g"));
        std::fs::create_dir_all(&p).unwrap();
        std::fs::create_dir_all(&g).unwrap();
        assert!(matches!(
            evaluate_directory(&p, &g, None, &EvalOptions::default()),
            Err(PdfnetError::EmptyInput(_))
        ));
        assert!(matches!(
            evaluate_directory(&dir.path().join("nope"), &g, None, &EvalOptions::default()),
            Err(PdfnetError::NotFound(_))
        ));
    }
}
