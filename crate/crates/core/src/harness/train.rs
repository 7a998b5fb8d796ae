//! Training loop with deep supervision, gradient accumulation, resumable
//! state and periodic checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_atomic, Checkpoint, TrainState};
use super::config::RunConfig;
use super::optim::{accumulate, named_grads, AdamW, AdamWConfig};
use crate::data::{augment, list_samples, load_triplet, AugmentConfig, DepthTriplet};
use crate::error::{PdfnetError, Result};
use crate::losses::{total_loss, LossReport};
use crate::metrics::{self, Sample};
use crate::network::{ForwardOptions, Pdfnet};
use crate::ops;

pub const TRAIN_DTYPE: DType = DType::F32;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_ECHO: &str = "config.txt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub samples: Vec<String>,
    pub loss: f64,
    pub components: LossReport,
    pub lr: f64,
    pub step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub state: TrainState,
    pub output_dir: PathBuf,
    pub log_path: PathBuf,
    /// Total loss of every step taken by this invocation.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// `(sample index, augmentation seed)` for every position of one epoch.
pub fn epoch_schedule(rng_seed: u64, epoch: u64, n: usize) -> Vec<(usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.into_iter().map(|i| (i, rng.gen())).collect()
}

/// Reads the log written by a training run.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PdfnetError::NotFound(path.to_path_buf()),
        _ => PdfnetError::io(path, e),
    })?;
    text.lines()
        .filter(|l| l.contains("\"components\""))
        .map(|l| serde_json::from_str(l).map_err(PdfnetError::from))
        .collect()
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let avg_vec = |f: &dyn Fn(&LossReport) -> &Vec<f64>| {
        (0..f(&reports[0]).len())
            .map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / n)
            .collect()
    };
    LossReport {
        wbce: avg(&|r| r.wbce),
        wiou: avg(&|r| r.wiou),
        ssim: avg(&|r| r.ssim),
        l_v: avg(&|r| r.l_v),
        l_g: avg(&|r| r.l_g),
        l_inte: avg(&|r| r.l_inte),
        l_f: avg(&|r| r.l_f),
        stage_losses: avg_vec(&|r| &r.stage_losses),
        silog_final: avg(&|r| r.silog_final),
        silog_stages: avg_vec(&|r| &r.silog_stages),
        total: avg(&|r| r.total),
        lambda1: reports[0].lambda1,
        lambda2: reports[0].lambda2,
    }
}

struct LoadJob {
    root: PathBuf,
    ids: Vec<String>,
    resolution: (usize, usize),
    augment: Option<AugmentConfig>,
}

impl LoadJob {
    fn load(&self, batch: &[(usize, u64)]) -> Result<DepthTriplet> {
        let items = batch
            .iter()
            .map(|&(i, seed)| {
                let t = load_triplet(&self.root, &self.ids[i], Some(self.resolution))?;
                match &self.augment {
                    Some(cfg) => augment(&t, seed, cfg),
                    None => Ok(t),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        DepthTriplet::stack(&items)?.to_dtype(TRAIN_DTYPE)
    }
}

/// Micro-batches in order, loaded inline or by a worker thread feeding a
/// bounded queue.
enum Loader {
    Inline {
        job: LoadJob,
        batches: std::vec::IntoIter<Vec<(usize, u64)>>,
    },
    Worker {
        rx: mpsc::Receiver<Result<DepthTriplet>>,
    },
}

impl Loader {
    fn new(job: LoadJob, batches: Vec<Vec<(usize, u64)>>, prefetch: usize) -> Self {
        if prefetch == 0 {
            return Loader::Inline {
                job,
                batches: batches.into_iter(),
            };
        }
        let (tx, rx) = mpsc::sync_channel(prefetch);
        std::thread::spawn(move || {
            for b in batches {
                // the receiver hangs up when training stops early
                if tx.send(job.load(&b)).is_err() {
                    break;
                }
            }
        });
        Loader::Worker { rx }
    }

    fn next_batch(&mut self) -> Result<DepthTriplet> {
        match self {
            Loader::Inline { job, batches } => {
                let b = batches.next().ok_or_else(|| PdfnetError::Data("loader ran out of batches".into()))?;
                job.load(&b)
            }
            Loader::Worker { rx } => rx
                .recv()
                .map_err(|_| PdfnetError::Data("loader thread stopped".into()))?,
        }
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Pdfnet,
    pub opt: AdamW,
    pub state: TrainState,
    train_dir: PathBuf,
    ids: Vec<String>,
    val: Vec<DepthTriplet>,
}

fn forward_options(cfg: &RunConfig) -> ForwardOptions {
    ForwardOptions {
        visual_only: cfg.visual_only,
        fuse_shallow: cfg.fuse_shallow,
    }
}

/// Mean MAE of the final prediction over preloaded samples.
pub fn mean_mae(model: &Pdfnet, samples: &[DepthTriplet], opts: ForwardOptions) -> Result<f64> {
    let mut total = 0.0;
    for t in samples {
        let out = model.forward_triplet(t, opts)?;
        let pred = ops::to_f64_vec(&out.final_prediction.detach())?;
        let gt: Vec<bool> = ops::to_f64_vec(&t.mask)?.iter().map(|&v| v >= 0.5).collect();
        total += metrics::mae(&Sample::new(&pred, &gt, t.height(), t.width())?);
    }
    Ok(total / samples.len() as f64)
}

impl Trainer {
    /// Builds the model, restoring from `cfg.resume` when set.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let train_dir = cfg
            .train_dir
            .clone()
            .ok_or_else(|| PdfnetError::Config("train_dir is required for training".into()))?;
        if !train_dir.exists() {
            return Err(PdfnetError::NotFound(train_dir));
        }
        let ids = list_samples(&train_dir)?;
        if ids.is_empty() {
            return Err(PdfnetError::EmptyInput(format!("no training samples in {}", train_dir.display())));
        }
        let val = match &cfg.val_dir {
            Some(dir) => {
                let ids = list_samples(dir)?;
                if ids.is_empty() {
                    return Err(PdfnetError::EmptyInput(format!("no validation samples in {}", dir.display())));
                }
                ids.iter()
                    .map(|id| load_triplet(dir, id, Some(cfg.resolution)))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        let model = Pdfnet::new(cfg.network(), cfg.seed, TRAIN_DTYPE, &Device::Cpu)?;
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        });
        let state = match &cfg.resume {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.config.network() != cfg.network() {
                    return Err(PdfnetError::Config(format!(
                        "{} was trained with a different network configuration",
                        path.display()
                    )));
                }
                ck.restore_params(model.params())?;
                opt.set_moments(ck.moments);
                ck.state
            }
            None => {
                // outside deterministic mode the schedule seed comes from the OS
                let rng_seed = if cfg.deterministic { cfg.seed } else { rand::random() };
                TrainState::new(rng_seed)
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            state,
            train_dir,
            ids,
            val,
        })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.state, self.model.params(), self.opt.moments())
    }

    fn done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs as u64 || (self.cfg.max_steps > 0 && self.state.step >= self.cfg.max_steps as u64)
    }

    /// Runs until `epochs` or `max_steps` is reached; writes the log and
    /// checkpoints under `output_dir`.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let out = self.cfg.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| PdfnetError::io(&out, e))?;
        write_atomic(&out.join(CONFIG_ECHO), self.cfg.to_text().as_bytes())?;
        let log_path = out.join(LOG_FILE);
        let log_file = if self.cfg.resume.is_some() {
            OpenOptions::new().create(true).append(true).open(&log_path)
        } else {
            File::create(&log_path)
        }
        .map_err(|e| PdfnetError::io(&log_path, e))?;
        let mut log = BufWriter::new(log_file);

        let n = self.ids.len();
        let per_step = self.cfg.batch_size * self.cfg.grad_accum;
        let opts = forward_options(&self.cfg);
        let losses_cfg = self.cfg.losses();
        let mut losses = Vec::new();
        let mut epochs = Vec::new();

        while !self.done() {
            let schedule = epoch_schedule(self.state.rng_seed, self.state.epoch, n);
            let pending: Vec<Vec<(usize, u64)>> = schedule[self.state.cursor..]
                .chunks(self.cfg.batch_size)
                .map(|c| c.to_vec())
                .collect();
            let job = LoadJob {
                root: self.train_dir.clone(),
                ids: self.ids.clone(),
                resolution: self.cfg.resolution,
                augment: self.cfg.augment.then(AugmentConfig::default),
            };
            let mut loader = Loader::new(job, pending, self.cfg.prefetch);
            let mut epoch_losses = Vec::new();

            let mut epoch_done = false;
            while !epoch_done && !self.done() {
                let t0 = Instant::now();
                let take = per_step.min(n - self.state.cursor);
                let micro = take.div_ceil(self.cfg.batch_size);
                let positions = &schedule[self.state.cursor..self.state.cursor + take];
                let mut grads = BTreeMap::new();
                let mut reports = Vec::with_capacity(micro);
                for _ in 0..micro {
                    let batch = loader.next_batch()?;
                    let outputs = self.model.forward_triplet(&batch, opts)?;
                    let (loss, report) = total_loss(&outputs, &batch.mask, &batch.depth_target, &losses_cfg)?;
                    if !report.total.is_finite() {
                        return Err(PdfnetError::Numerics(format!(
                            "loss is {} at step {}; keeping the last checkpoint",
                            report.total,
                            self.state.step + 1
                        )));
                    }
                    let scaled = (loss / micro as f64)?;
                    accumulate(&mut grads, named_grads(self.model.params(), &scaled.backward()?))?;
                    reports.push(report);
                }
                self.opt.step(self.model.params(), &grads)?;
                self.state.step += 1;
                self.state.cursor += take;

                let components = mean_report(&reports);
                let record = StepRecord {
                    step: self.state.step,
                    epoch: self.state.epoch,
                    samples: positions.iter().map(|&(i, _)| self.ids[i].clone()).collect(),
                    loss: components.total,
                    components,
                    lr: self.cfg.learning_rate,
                    step_ms: t0.elapsed().as_secs_f64() * 1e3,
                };
                losses.push(record.loss);
                epoch_losses.push(record.loss);
                if self.state.step.is_multiple_of(self.cfg.log_every as u64) {
                    writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| PdfnetError::io(&log_path, e))?;
                    log.flush().map_err(|e| PdfnetError::io(&log_path, e))?;
                }
                log::debug!("step {} loss {:.6}", record.step, record.loss);

                if self.state.cursor == n {
                    epoch_done = true;
                    let rec = self.finish_epoch(&epoch_losses, &out)?;
                    writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| PdfnetError::io(&log_path, e))?;
                    log::info!("epoch {} done at step {}: mean loss {:.6}", rec.epoch, rec.step, rec.mean_loss);
                    epochs.push(rec);
                }
                if self.cfg.checkpoint_every > 0 && self.state.step.is_multiple_of(self.cfg.checkpoint_every as u64) {
                    self.checkpoint().save(&out.join(step_checkpoint_name(self.state.step)))?;
                }
            }
        }
        log.flush().map_err(|e| PdfnetError::io(&log_path, e))?;
        self.checkpoint().save(&out.join(LAST_CHECKPOINT))?;
        Ok(TrainSummary {
            state: self.state.clone(),
            output_dir: out,
            log_path,
            losses,
            epochs,
        })
    }

    fn finish_epoch(&mut self, epoch_losses: &[f64], out: &Path) -> Result<EpochRecord> {
        let finished = self.state.epoch;
        self.state.epoch += 1;
        self.state.cursor = 0;
        let val_mae = if self.val.is_empty() {
            None
        } else {
            Some(mean_mae(&self.model, &self.val, forward_options(&self.cfg))?)
        };
        if let Some(mae) = val_mae {
            if self.state.best_val_mae.is_none_or(|best| mae < best) {
                self.state.best_val_mae = Some(mae);
                self.state.best_step = Some(self.state.step);
                self.checkpoint().save(&out.join(BEST_CHECKPOINT))?;
            }
        }
        self.checkpoint().save(&out.join(LAST_CHECKPOINT))?;
        let mean_loss = if epoch_losses.is_empty() {
            f64::NAN
        } else {
            epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64
        };
        Ok(EpochRecord {
            epoch: finished,
            step: self.state.step,
            mean_loss,
            val_mae,
        })
    }

    /// Parameter snapshot, for comparisons in tests.
    pub fn param_values(&self) -> Result<BTreeMap<String, Tensor>> {
        self.model
            .params()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    Trainer::new(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_a_permutation_and_repeatable() {
        let a = epoch_schedule(5, 3, 20);
        assert_eq!(a, epoch_schedule(5, 3, 20));
        assert_ne!(a, epoch_schedule(5, 4, 20));
        let mut idx: Vec<usize> = a.iter().map(|&(i, _)| i).collect();
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }
}
