//! Stage loss and the deep-supervised total objective.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::depth::{silog_per_sample, SILOG_LAMBDA};
use super::mask::{pixel_weights, ssim_per_sample, weighted_bce_per_sample, weighted_iou_per_sample};
use super::prior::depth_prior_terms;
use crate::error::{PdfnetError, Result};
use crate::network::PdfnetOutputs;
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub use_wbce: bool,
    pub use_wiou: bool,
    pub use_ssim: bool,
    pub use_inte: bool,
    /// Weight of the auxiliary stage losses.
    pub lambda1: f64,
    /// Weight of the depth supervision.
    pub lambda2: f64,
    pub silog_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_wbce: true,
            use_wiou: true,
            use_ssim: true,
            use_inte: true,
            lambda1: 0.5,
            lambda2: 0.1,
            silog_lambda: SILOG_LAMBDA,
        }
    }
}

/// Pieces of one stage loss, each a per-sample vector of length `B`.
#[derive(Debug, Clone)]
pub struct StageTerms {
    pub wbce: Tensor,
    pub wiou: Tensor,
    pub ssim: Tensor,
    pub l_v: Tensor,
    pub l_g: Tensor,
    pub l_inte: Tensor,
    pub total: Tensor,
}

/// Per-sample `wBCE + wIoU + SSIM/2 + l_inte` on a logit map against a binary
/// mask and the supervision depth. Disabled components contribute exact zeros.
pub fn stage_terms(logits: &Tensor, mask: &Tensor, depth: &Tensor, cfg: &LossConfig) -> Result<StageTerms> {
    ops::ensure_same_shape(logits, mask, "stage loss mask")?;
    ops::ensure_same_shape(logits, depth, "stage loss depth")?;
    let zero = Tensor::zeros(logits.dim(0)?, logits.dtype(), logits.device())?;
    let p = ops::sigmoid(logits)?;
    let w = pixel_weights(mask)?;
    let wbce = if cfg.use_wbce { weighted_bce_per_sample(logits, mask, &w)? } else { zero.clone() };
    let wiou = if cfg.use_wiou { weighted_iou_per_sample(&p, mask, &w)? } else { zero.clone() };
    let ssim = if cfg.use_ssim { ssim_per_sample(&p, mask)? } else { zero.clone() };
    let (l_v, l_g) = if cfg.use_inte {
        let terms = depth_prior_terms(&p, mask, depth)?;
        (terms.stability_per_sample()?, terms.continuity_per_sample()?)
    } else {
        (zero.clone(), zero.clone())
    };
    let l_inte = ((&l_v + &l_g)? * 0.5)?;
    let total = (((&wbce + &wiou)? + (&ssim * 0.5)?)? + &l_inte)?;
    Ok(StageTerms {
        wbce,
        wiou,
        ssim,
        l_v,
        l_g,
        l_inte,
        total,
    })
}

/// Batch-mean stage loss.
pub fn stage_loss(logits: &Tensor, mask: &Tensor, depth: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(stage_terms(logits, mask, depth, cfg)?.total.mean_all()?)
}

/// Scalar record of every loss component of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub wbce: f64,
    pub wiou: f64,
    pub ssim: f64,
    pub l_v: f64,
    pub l_g: f64,
    pub l_inte: f64,
    pub l_f: f64,
    /// Stage losses, coarse (stage 5) to fine (stage 1).
    pub stage_losses: Vec<f64>,
    pub silog_final: f64,
    pub silog_stages: Vec<f64>,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossReport {
    /// `l_f + λ1·Σ l_i + λ2·(SILog + λ1·Σ SILog_i)`, summed in stage order.
    pub fn recombine(&self) -> f64 {
        let stages = self.stage_losses.iter().fold(0.0, |a, b| a + b);
        let depth = self.silog_stages.iter().fold(0.0, |a, b| a + b);
        self.l_f + self.lambda1 * stages + self.lambda2 * (self.silog_final + self.lambda1 * depth)
    }
}

fn sum_in_order(ts: &[Tensor]) -> Result<Tensor> {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = (acc + t)?;
    }
    Ok(acc)
}

/// Per-sample pieces of the total objective.
#[derive(Debug, Clone)]
pub struct TotalTerms {
    pub final_terms: StageTerms,
    /// Stage losses, coarse to fine.
    pub stage_totals: Vec<Tensor>,
    pub silog_final: Tensor,
    pub silog_stages: Vec<Tensor>,
}

impl TotalTerms {
    /// The weighted summands of the total, each per sample:
    /// `[l_f, λ1·l_i…, λ2·SILog, λ2·λ1·SILog_i…]`.
    pub fn weighted_components(&self, cfg: &LossConfig) -> Result<Vec<Tensor>> {
        let mut out = vec![self.final_terms.total.clone()];
        for t in &self.stage_totals {
            out.push((t * cfg.lambda1)?);
        }
        out.push((&self.silog_final * cfg.lambda2)?);
        for t in &self.silog_stages {
            out.push((t * (cfg.lambda2 * cfg.lambda1))?);
        }
        Ok(out)
    }
}

/// Per-sample terms over raw head outputs; stage targets are the mask
/// (area-downsampled, re-binarized at 0.5) and the depth target (area-downsampled).
pub fn total_terms(
    stage_logits: &[Tensor],
    final_logit: &Tensor,
    stage_depth_logits: &[Tensor],
    final_depth_logit: &Tensor,
    mask: &Tensor,
    depth_target: &Tensor,
    cfg: &LossConfig,
) -> Result<TotalTerms> {
    if stage_logits.is_empty() || stage_logits.len() != stage_depth_logits.len() {
        return Err(PdfnetError::shape(format!(
            "need matching non-empty stage lists, got {} mask and {} depth",
            stage_logits.len(),
            stage_depth_logits.len()
        )));
    }
    // with a zero depth weight the depth heads stay out of the graph entirely,
    // so their parameters receive no gradient rather than a zero one
    let depth_in = |t: &Tensor| if cfg.lambda2 == 0.0 { t.detach() } else { t.clone() };
    let final_terms = stage_terms(final_logit, mask, depth_target, cfg)?;
    let silog_final = silog_per_sample(&ops::sigmoid(&depth_in(final_depth_logit))?, depth_target, cfg.silog_lambda)?;
    let mut stage_totals = Vec::with_capacity(stage_logits.len());
    let mut silog_stages = Vec::with_capacity(stage_logits.len());
    for (logit, dlogit) in stage_logits.iter().zip(stage_depth_logits) {
        let (_, _, h, w) = logit.dims4()?;
        let m = ops::downsample_mask(mask, h, w)?;
        let d = ops::area_downsample(depth_target, h, w)?;
        stage_totals.push(stage_terms(logit, &m, &d, cfg)?.total);
        silog_stages.push(silog_per_sample(&ops::sigmoid(&depth_in(dlogit))?, &d, cfg.silog_lambda)?);
    }
    Ok(TotalTerms {
        final_terms,
        stage_totals,
        silog_final,
        silog_stages,
    })
}

/// Batch-mean total objective and its report. The total is assembled from the
/// batch means in the same order as [`LossReport::recombine`].
pub fn total_loss_from_logits(
    stage_logits: &[Tensor],
    final_logit: &Tensor,
    stage_depth_logits: &[Tensor],
    final_depth_logit: &Tensor,
    mask: &Tensor,
    depth_target: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, LossReport)> {
    ops::ensure_finite(mask, "mask")?;
    ops::ensure_finite(depth_target, "depth target")?;
    let terms = total_terms(stage_logits, final_logit, stage_depth_logits, final_depth_logit, mask, depth_target, cfg)?;
    let mean = |t: &Tensor| -> Result<Tensor> { Ok(t.mean_all()?) };
    let stage_means = terms.stage_totals.iter().map(mean).collect::<Result<Vec<_>>>()?;
    let silog_means = terms.silog_stages.iter().map(mean).collect::<Result<Vec<_>>>()?;
    let l_f = mean(&terms.final_terms.total)?;
    let silog_final = mean(&terms.silog_final)?;
    let depth_part = (&silog_final + (sum_in_order(&silog_means)? * cfg.lambda1)?)?;
    let total = ((&l_f + (sum_in_order(&stage_means)? * cfg.lambda1)?)? + (depth_part * cfg.lambda2)?)?;
    let total_value = ops::scalar_f64(&total)?;
    if !total_value.is_finite() {
        return Err(PdfnetError::Numerics(format!("total loss is {total_value}")));
    }
    let s = |t: &Tensor| ops::scalar_f64(&t.mean_all()?);
    let ft = &terms.final_terms;
    let report = LossReport {
        wbce: s(&ft.wbce)?,
        wiou: s(&ft.wiou)?,
        ssim: s(&ft.ssim)?,
        l_v: s(&ft.l_v)?,
        l_g: s(&ft.l_g)?,
        l_inte: s(&ft.l_inte)?,
        l_f: s(&l_f)?,
        stage_losses: stage_means.iter().map(s).collect::<Result<_>>()?,
        silog_final: s(&silog_final)?,
        silog_stages: silog_means.iter().map(s).collect::<Result<_>>()?,
        total: total_value,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    Ok((total, report))
}

pub fn total_loss(outputs: &PdfnetOutputs, mask: &Tensor, depth_target: &Tensor, cfg: &LossConfig) -> Result<(Tensor, LossReport)> {
    total_loss_from_logits(
        &outputs.stage_logits,
        &outputs.final_logit,
        &outputs.stage_depth_logits,
        &outputs.final_depth_logit,
        mask,
        depth_target,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::scalar_f64;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, h: usize, lo: f64, hi: f64) -> Tensor {
        let v: Vec<f64> = (0..h * h).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(v, (1, 1, h, h), &Device::Cpu).unwrap()
    }

    fn rand_mask(rng: &mut ChaCha8Rng, h: usize) -> Tensor {
        let v: Vec<f64> = (0..h * h).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(v, (1, 1, h, h), &Device::Cpu).unwrap()
    }

    fn random_case(seed: u64) -> (Vec<Tensor>, Tensor, Vec<Tensor>, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [2, 4, 8, 16, 16];
        let sl = sizes.iter().map(|&s| rand_t(&mut rng, s, -3.0, 3.0)).collect();
        let dl = sizes.iter().map(|&s| rand_t(&mut rng, s, -3.0, 3.0)).collect();
        (sl, rand_t(&mut rng, 32, -3.0, 3.0), dl, rand_t(&mut rng, 32, -3.0, 3.0), rand_mask(&mut rng, 32), rand_t(&mut rng, 32, 0.05, 1.0))
    }

    #[test]
    fn report_recombines_exactly() {
        let (sl, fl, dl, fd, m, d) = random_case(1);
        let (total, report) = total_loss_from_logits(&sl, &fl, &dl, &fd, &m, &d, &LossConfig::default()).unwrap();
        assert_eq!(report.recombine(), scalar_f64(&total).unwrap());
        assert_eq!(report.l_inte, (report.l_v + report.l_g) * 0.5);
        assert_eq!(report.stage_losses.len(), 5);
    }

    #[test]
    fn disabled_components_drop_out_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, m, d) = (rand_t(&mut rng, 16, -2.0, 2.0), rand_mask(&mut rng, 16), rand_t(&mut rng, 16, 0.1, 1.0));
        let full = stage_terms(&l, &m, &d, &LossConfig::default()).unwrap();
        let cfg = LossConfig { use_ssim: false, use_inte: false, ..Default::default() };
        let part = stage_terms(&l, &m, &d, &cfg).unwrap();
        let expect = scalar_f64(&full.wbce).unwrap() + scalar_f64(&full.wiou).unwrap();
        assert!((scalar_f64(&part.total).unwrap() - expect).abs() < 1e-14);
        assert_eq!(scalar_f64(&part.l_inte).unwrap(), 0.0);
    }

    #[test]
    fn zero_depth_weight_cuts_depth_gradients() {
        let (sl, fl, dl, fd, m, d) = random_case(3);
        let vars: Vec<candle_core::Var> = dl.iter().map(|t| candle_core::Var::from_tensor(t).unwrap()).collect();
        let fdv = candle_core::Var::from_tensor(&fd).unwrap();
        let dts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let cfg = LossConfig { lambda2: 0.0, ..Default::default() };
        let (total, _) = total_loss_from_logits(&sl, &fl, &dts, fdv.as_tensor(), &m, &d, &cfg).unwrap();
        let grads = total.backward().unwrap();
        for v in vars.iter().chain(std::iter::once(&fdv)) {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }

    #[test]
    fn perfect_stage_prediction_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = rand_mask(&mut rng, 16);
        let d = rand_t(&mut rng, 16, 0.1, 1.0);
        let logits = ((m.to_dtype(DType::F64).unwrap() * 2.0).unwrap() - 1.0).unwrap() * 30.0;
        let l = stage_loss(&logits.unwrap(), &m, &d, &LossConfig::default()).unwrap();
        assert!(scalar_f64(&l).unwrap() < 1e-5);
    }

    #[test]
    fn stage_count_mismatch_is_rejected() {
        let (sl, fl, dl, fd, m, d) = random_case(5);
        assert!(total_loss_from_logits(&sl, &fl, &dl[..3], &fd, &m, &d, &LossConfig::default()).is_err());
    }
}
