//! Quick invariant suite behind the `selftest` command.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, TrainState};
use super::config::{BackbonePreset, RunConfig};
use super::optim::Moments;
use crate::data::{partition_patches, reassemble_patches, VALID_GRIDS};
use crate::error::{PdfnetError, Result};
use crate::fse::{boundary_map, fse_forward, integrity_map, patch_boundary_scores, FseBlock};
use crate::losses::depth::silog_per_sample;
use crate::losses::mask::{pixel_weights, ssim_per_sample, weighted_bce_per_sample, weighted_iou_per_sample};
use crate::losses::prior::{depth_prior_terms, depth_stability_loss};
use crate::losses::{check_gradient_batched, total_terms, LossConfig, FD_STEP, SILOG_LAMBDA};
use crate::metrics::{self, reference, Sample};
use crate::nn::{Init, ParamStore};
use crate::ops::{scalar_f64, to_f64_vec};

pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

type Check = fn() -> Result<(bool, String)>;

fn t4(v: Vec<f64>, h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu)?)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn binary(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()
}

/// Broadcasts a fixed `1×1×h×w` map to the probe batch of `v`.
fn like_batch(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let b = v.dim(0)?;
    let (_, _, h, w) = m.dims4()?;
    Ok(m.broadcast_as((b, 1, h, w))?.contiguous()?)
}

fn col(t: Tensor) -> Result<Tensor> {
    Ok(t.unsqueeze(1)?)
}

/// Worst relative error over `instances` random 8×8 problems for every loss.
pub fn loss_gradients(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["wbce", "wiou", "ssim", "l_v", "l_g", "l_inte", "silog", "total"];
    let mut worst = vec![0.0f64; names.len()];
    let cfg = LossConfig::default();
    for _ in 0..instances {
        let mask = t4(binary(&mut rng, 64, 0.4), 8, 8)?;
        let depth = t4(uniform(&mut rng, 64, 0.05, 1.0), 8, 8)?;
        let w = pixel_weights(&mask)?;
        let logits = t4(uniform(&mut rng, 64, -3.0, 3.0), 8, 8)?;
        let p = t4(uniform(&mut rng, 64, 0.05, 0.95), 8, 8)?;
        let dpred = t4(uniform(&mut rng, 64, 0.05, 1.0), 8, 8)?;
        let checks: Vec<Box<dyn Fn(&Tensor) -> Result<Tensor>>> = vec![
            Box::new(|v| col(weighted_bce_per_sample(v, &like_batch(&mask, v)?, &like_batch(&w, v)?)?)),
            Box::new(|v| col(weighted_iou_per_sample(v, &like_batch(&mask, v)?, &like_batch(&w, v)?)?)),
            Box::new(|v| col(ssim_per_sample(v, &like_batch(&mask, v)?)?)),
            Box::new(|v| col(depth_prior_terms(v, &like_batch(&mask, v)?, &like_batch(&depth, v)?)?.stability_per_sample()?)),
            Box::new(|v| col(depth_prior_terms(v, &like_batch(&mask, v)?, &like_batch(&depth, v)?)?.continuity_per_sample()?)),
            Box::new(|v| {
                let terms = depth_prior_terms(v, &like_batch(&mask, v)?, &like_batch(&depth, v)?)?;
                let lv = (terms.stability_per_sample()? * 0.5)?;
                let lg = (terms.continuity_per_sample()? * 0.5)?;
                Ok(Tensor::stack(&[lv, lg], 1)?)
            }),
            Box::new(|v| col(silog_per_sample(v, &like_batch(&depth, v)?, SILOG_LAMBDA)?)),
        ];
        let inputs = [&logits, &p, &p, &p, &p, &p, &dpred];
        for (k, (f, x)) in checks.iter().zip(inputs).enumerate() {
            // probes stack along a new leading axis, so drop the unit batch
            let g = check_gradient_batched(f, &x.squeeze(0)?, FD_STEP)?;
            worst[k] = worst[k].max(g.max_rel_err);
        }
        let g = check_gradient_batched(|v| total_columns(v, &mask, &depth, &cfg), &total_input(&mut rng)?, FD_STEP)?;
        worst[7] = worst[7].max(g.max_rel_err);
    }
    Ok(names.into_iter().zip(worst).collect())
}

/// Side lengths of the five stage logits fed to the total objective.
pub const TOTAL_STAGE_SIDES: [usize; 5] = [1, 2, 4, 4, 8];

/// Stage mask logits, final mask logit, stage depth logits and final depth
/// logit, flattened in that order.
pub fn total_input(rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let stage: usize = TOTAL_STAGE_SIDES.iter().map(|s| s * s).sum();
    let n = 2 * (stage + 64);
    Ok(Tensor::from_vec(uniform(rng, n, -2.5, 2.5), n, &Device::Cpu)?)
}

/// Weighted summands of the total objective for a batch of flattened inputs.
pub fn total_columns(v: &Tensor, mask: &Tensor, depth: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let b = v.dim(0)?;
    let mut off = 0;
    let mut take = |side: usize| -> Result<Tensor> {
        let t = v.narrow(1, off, side * side)?.reshape((b, 1, side, side))?;
        off += side * side;
        Ok(t)
    };
    let sl = TOTAL_STAGE_SIDES.iter().map(|&s| take(s)).collect::<Result<Vec<_>>>()?;
    let fl = take(8)?;
    let dl = TOTAL_STAGE_SIDES.iter().map(|&s| take(s)).collect::<Result<Vec<_>>>()?;
    let fd = take(8)?;
    let terms = total_terms(&sl, &fl, &dl, &fd, &like_batch(mask, v)?, &like_batch(depth, v)?, cfg)?;
    Ok(Tensor::stack(&terms.weighted_components(cfg)?, 1)?)
}

fn check_gradients() -> Result<(bool, String)> {
    let rows = loss_gradients(3, 17)?;
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = rows.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst <= GRAD_TOLERANCE, detail))
}

fn check_hand_lv() -> Result<(bool, String)> {
    let v = scalar_f64(&depth_stability_loss(
        &t4(vec![0.8, 0.3], 1, 2)?,
        &t4(vec![1.0, 0.0], 1, 2)?,
        &t4(vec![0.5, 0.9], 1, 2)?,
    )?)?;
    Ok(((v - 0.0248824).abs() <= 1e-6, format!("l_v = {v:.7}")))
}

fn check_patch_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for g in VALID_GRIDS {
        for _ in 0..5 {
            let n = 2 * 3 * 32 * 32;
            let x = Tensor::from_vec(uniform(&mut rng, n, -1.0, 1.0), (2, 3, 32, 32), &Device::Cpu)?;
            let back = reassemble_patches(&partition_patches(&x, g)?)?;
            if to_f64_vec(&back)? != to_f64_vec(&x)? {
                return Ok((false, format!("g = {g} changed the tensor")));
            }
        }
    }
    Ok((true, format!("g in {VALID_GRIDS:?}")))
}

fn check_fse_invariants() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let p = t4(uniform(&mut rng, 256, 0.0, 1.0), 16, 16)?;
        let pooled = t4(uniform(&mut rng, 256, 0.0, 1.0), 16, 16)?;
        let b = boundary_map(&p, &pooled, 0.1)?;
        let s = integrity_map(&p, &b)?;
        let (bv, sv, pv) = (to_f64_vec(&b)?, to_f64_vec(&s)?, to_f64_vec(&p)?);
        if bv.iter().zip(&sv).any(|(b, s)| b * s != 0.0) || bv.iter().zip(&sv).zip(&pv).any(|((b, s), p)| b + s < *p) {
            return Ok((false, format!("separation invariant broken in trial {trial}")));
        }
        let g = [2, 4, 8][trial % 3];
        let map = binary(&mut rng, 256, 0.05);
        let scores = to_f64_vec(&patch_boundary_scores(&t4(map.clone(), 16, 16)?, g)?)?;
        let side = 16 / g;
        for (n, &score) in scores.iter().enumerate() {
            let (py, px) = (n / g, n % g);
            let any = (0..side).any(|y| (0..side).any(|x| map[(py * side + y) * 16 + px * side + x] != 0.0));
            if score != if any { 1.0 } else { 0.0 } {
                return Ok((false, format!("patch {n} score wrong for g = {g}")));
            }
        }
    }
    Ok((true, "50 trials".into()))
}

fn check_residual_identity() -> Result<(bool, String)> {
    let mut store = ParamStore::new(5, DType::F32, Device::Cpu);
    let block = FseBlock::new(&mut store.root().pp("fse"), 16, 4, true)?;
    let rand = || Tensor::randn(0f32, 1.0, (1, 16, 32, 32), &Device::Cpu);
    let (v, d, p) = (rand()?, rand()?, rand()?);
    let prev = Tensor::rand(0f32, 1.0, (1, 1, 16, 16), &Device::Cpu)?;
    let out = fse_forward(&block, &v, &d, &p, Some(&prev), 8, 0.1, 16)?;
    let mut worst = 0.0f64;
    for (a, b) in [(&out.visual, &v), (&out.depth, &d), (&out.patch, &p)] {
        worst = worst.max(scalar_f64(&(a - b)?.abs()?.max_all()?)?);
    }
    Ok((worst == 0.0, format!("max abs diff {worst}")))
}

fn check_metric_oracles() -> Result<(bool, String)> {
    let mut pairs = 0;
    for m in 0..512usize {
        let gt: Vec<bool> = (0..9).map(|i| m >> i & 1 == 1).collect();
        for q in (0..512usize).step_by(37) {
            let pred: Vec<f64> = (0..9).map(|i| (q >> i & 1) as f64).collect();
            let s = Sample::new(&pred, &gt, 3, 3)?;
            let curve = metrics::f_measure_curve(&s);
            if metrics::mae(&s) != reference::mae(&s) || curve.f[128] != reference::f_at_level(&s, 128) {
                return Ok((false, format!("mask {m} prediction {q}")));
            }
            pairs += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let pred = uniform(&mut rng, 256, 0.0, 1.0);
        let gt: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.3)).collect();
        let s = Sample::new(&pred, &gt, 16, 16)?;
        worst = worst
            .max((metrics::s_measure(&s) - reference::s_measure(&s)).abs())
            .max((metrics::e_measure(&s) - reference::e_measure(&s)).abs())
            .max((metrics::weighted_f_measure(&s) - reference::weighted_f_measure(&s)).abs());
    }
    Ok((worst <= 1e-9, format!("{pairs} binary pairs exact, S/E/wF diff {worst:.1e}")))
}

fn check_config_round_trip() -> Result<(bool, String)> {
    let cfg = RunConfig {
        train_dir: Some("data/train".into()),
        resolution: (512, 768),
        backbone: BackbonePreset::Small,
        lambda2: 0.25,
        use_ssim: false,
        ..RunConfig::default()
    };
    let back = RunConfig::parse_text(&cfg.to_text())?;
    Ok((back == cfg && back.to_text() == cfg.to_text(), format!("{} keys", super::config::KEYS.len())))
}

fn check_checkpoint_round_trip() -> Result<(bool, String)> {
    let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
    store.root().param("w", &[3, 4], 4, Init::Normal { gain: 1.0 })?;
    let m = Tensor::randn(0f32, 1.0, (3, 4), &Device::Cpu)?;
    let moments = [("w".to_string(), Moments { v: m.sqr()?, m, steps: 3 })].into_iter().collect();
    let ck = Checkpoint::capture(&RunConfig::default(), &TrainState::new(9), &store, &moments);
    let bytes = ck.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    Ok((back.to_bytes()? == bytes, format!("{} bytes", bytes.len())))
}

pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("loss gradients vs finite differences", check_gradients as Check),
        ("hand-computed l_v", check_hand_lv),
        ("patch partition round trip", check_patch_round_trip),
        ("boundary/integrity invariants", check_fse_invariants),
        ("zero-init FSE residual identity", check_residual_identity),
        ("metric oracles", check_metric_oracles),
        ("config round trip", check_config_round_trip),
        ("checkpoint round trip", check_checkpoint_round_trip),
    ]
}

/// Runs every check; errors count as failures.
pub fn run_selftest() -> Vec<CheckRow> {
    checks()
        .into_iter()
        .map(|(name, check)| {
            let t0 = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckRow {
                name: name.to_string(),
                passed,
                detail,
                millis: t0.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect()
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{:<4} {:<width$}  {:>8.1} ms  {}\n",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.millis,
            r.detail
        ));
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {failed} failed\n", rows.len()));
    out
}

/// `Err` when any row failed, for callers that need an exit status.
pub fn require_all(rows: &[CheckRow]) -> Result<()> {
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(PdfnetError::Numerics(format!("self-test failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let rows = run_selftest();
        let table = format_table(&rows);
        assert!(require_all(&rows).is_ok(), "{table}");
    }
}
