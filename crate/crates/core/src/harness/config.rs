//! Run configuration: a flat `key = value` file with typed parsing.
//!
//! Values are resolved in the order default < file < `PDFNET_<KEY>` environment
//! variable < command-line flag. Unknown keys are rejected at every layer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::VALID_GRIDS;
use crate::error::{PdfnetError, Result};
use crate::losses::{LossConfig, SILOG_LAMBDA};
use crate::network::{BackboneConfig, NetworkConfig};

pub const ENV_PREFIX: &str = "PDFNET_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackbonePreset {
    Small,
    Base,
}

impl FromStr for BackbonePreset {
    type Err = PdfnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Self::Small),
            "base" => Ok(Self::Base),
            other => Err(PdfnetError::Config(format!("unknown backbone {other:?} (small|base)"))),
        }
    }
}

impl std::fmt::Display for BackbonePreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Small => "small",
            Self::Base => "base",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Checkpoint to resume training from.
    pub resume: Option<PathBuf>,
    pub resolution: (usize, usize),
    pub grid: usize,
    pub backbone: BackbonePreset,
    pub width_scale: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub use_wbce: bool,
    pub use_wiou: bool,
    pub use_ssim: bool,
    pub use_inte: bool,
    pub visual_only: bool,
    pub fuse_shallow: bool,
    pub augment: bool,
    pub seed: u64,
    pub deterministic: bool,
    /// Extra checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Batches prepared ahead by the loader thread; 0 loads inline.
    pub prefetch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            output_dir: PathBuf::from("runs/pdfnet"),
            resume: None,
            resolution: (1024, 1024),
            grid: 8,
            backbone: BackbonePreset::Base,
            width_scale: 1.0,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            max_steps: 0,
            batch_size: 1,
            grad_accum: 1,
            lambda1: 0.5,
            lambda2: 0.1,
            tau: 0.1,
            use_wbce: true,
            use_wiou: true,
            use_ssim: true,
            use_inte: true,
            visual_only: false,
            fuse_shallow: true,
            augment: true,
            seed: 0,
            deterministic: true,
            checkpoint_every: 0,
            log_every: 1,
            prefetch: 2,
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "train_dir",
    "val_dir",
    "output_dir",
    "resume",
    "resolution",
    "grid",
    "backbone",
    "width_scale",
    "learning_rate",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "epochs",
    "max_steps",
    "batch_size",
    "grad_accum",
    "lambda1",
    "lambda2",
    "tau",
    "use_wbce",
    "use_wiou",
    "use_ssim",
    "use_inte",
    "visual_only",
    "fuse_shallow",
    "augment",
    "seed",
    "deterministic",
    "checkpoint_every",
    "log_every",
    "prefetch",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| PdfnetError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(PdfnetError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn parse_resolution(value: &str) -> Result<(usize, usize)> {
    let (h, w) = value.split_once('x').unwrap_or((value, value));
    Ok((parse("resolution", h.trim())?, parse("resolution", w.trim())?))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "train_dir" => self.train_dir = parse_path(v),
            "val_dir" => self.val_dir = parse_path(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "resume" => self.resume = parse_path(v),
            "resolution" => self.resolution = parse_resolution(v)?,
            "grid" => self.grid = parse(key, v)?,
            "backbone" => self.backbone = v.parse()?,
            "width_scale" => self.width_scale = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "grad_accum" => self.grad_accum = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "use_wbce" => self.use_wbce = parse_bool(key, v)?,
            "use_wiou" => self.use_wiou = parse_bool(key, v)?,
            "use_ssim" => self.use_ssim = parse_bool(key, v)?,
            "use_inte" => self.use_inte = parse_bool(key, v)?,
            "visual_only" => self.visual_only = parse_bool(key, v)?,
            "fuse_shallow" => self.fuse_shallow = parse_bool(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "prefetch" => self.prefetch = parse(key, v)?,
            other => return Err(PdfnetError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Text form of one key, as accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "train_dir" => show_path(&self.train_dir),
            "val_dir" => show_path(&self.val_dir),
            "output_dir" => self.output_dir.display().to_string(),
            "resume" => show_path(&self.resume),
            "resolution" => format!("{}x{}", self.resolution.0, self.resolution.1),
            "grid" => self.grid.to_string(),
            "backbone" => self.backbone.to_string(),
            "width_scale" => self.width_scale.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "grad_accum" => self.grad_accum.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "tau" => self.tau.to_string(),
            "use_wbce" => self.use_wbce.to_string(),
            "use_wiou" => self.use_wiou.to_string(),
            "use_ssim" => self.use_ssim.to_string(),
            "use_inte" => self.use_inte.to_string(),
            "visual_only" => self.visual_only.to_string(),
            "fuse_shallow" => self.fuse_shallow.to_string(),
            "augment" => self.augment.to_string(),
            "seed" => self.seed.to_string(),
            "deterministic" => self.deterministic.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "prefetch" => self.prefetch.to_string(),
            other => return Err(PdfnetError::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PdfnetError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| PdfnetError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PdfnetError::NotFound(path.to_path_buf()),
            _ => PdfnetError::io(path, e),
        })?;
        Self::parse_text(&text)
    }

    /// Layers file, environment and flags over the defaults.
    ///
    /// `env` is scanned for `PDFNET_<KEY>` names; `flags` holds `(key, value)`
    /// pairs already split by the caller.
    pub fn resolve<I>(file: Option<&Path>, env: I, flags: &[(String, String)]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let cfg = Self::resolve_layers(file, env, flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`RunConfig::resolve`] without the final consistency check, for
    /// commands that only read a few keys.
    pub fn resolve_layers<I>(file: Option<&Path>, env: I, flags: &[(String, String)]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => PdfnetError::NotFound(path.to_path_buf()),
                _ => PdfnetError::io(path, e),
            })?;
            cfg.apply_text(&text)
                .map_err(|e| PdfnetError::Config(format!("{}: {e}", path.display())))?;
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        env.sort();
        for (k, v) in env {
            cfg.set(&k, &v)
                .map_err(|e| PdfnetError::Config(format!("environment {ENV_PREFIX}{}: {e}", k.to_ascii_uppercase())))?;
        }
        for (k, v) in flags {
            cfg.set(k, v).map_err(|e| PdfnetError::Config(format!("flag --{}: {e}", k.replace('_', "-"))))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PdfnetError::Config(msg));
        if !VALID_GRIDS.contains(&self.grid) {
            return bad(format!("grid {} not in {VALID_GRIDS:?}", self.grid));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.log_every == 0 {
            return bad("batch_size, grad_accum and log_every must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("tau", self.tau),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        self.network().validate()?;
        self.network().check_input(self.resolution.0, self.resolution.1)
    }

    pub fn network(&self) -> NetworkConfig {
        let base = match self.backbone {
            BackbonePreset::Small => NetworkConfig::small(),
            BackbonePreset::Base => NetworkConfig::default(),
        };
        NetworkConfig {
            backbone: BackboneConfig {
                width_scale: self.width_scale,
                ..base.backbone.clone()
            },
            grid: self.grid,
            tau: self.tau,
            ..base
        }
    }

    pub fn losses(&self) -> LossConfig {
        LossConfig {
            use_wbce: self.use_wbce,
            use_wiou: self.use_wiou,
            use_ssim: self.use_ssim,
            use_inte: self.use_inte,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            silog_lambda: SILOG_LAMBDA,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            backbone: BackbonePreset::Small,
            resolution: (256, 256),
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_follow_training_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.epochs, c.grid), (1e-5, 1, 100, 8));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = small();
        c.learning_rate = 3.7e-4;
        c.train_dir = Some("data/train".into());
        c.use_inte = false;
        c.lambda2 = 0.0;
        let back = RunConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse_text("learning_rat = 1e-3\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(RunConfig::parse_text("no equals sign").is_err());
        assert!(RunConfig::parse_text("grid = 3").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse_text("# run\n\nseed = 7  # trailing\nresolution = 512\n").unwrap();
        assert_eq!((c.seed, c.resolution), (7, (512, 512)));
    }

    #[test]
    fn precedence_is_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "seed = 1\nepochs = 3\nlambda1 = 0.25\n").unwrap();
        let env = vec![
            ("PDFNET_SEED".to_string(), "2".to_string()),
            ("PDFNET_EPOCHS".to_string(), "4".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let flags = vec![("seed".to_string(), "3".to_string())];
        let c = RunConfig::resolve(Some(&file), env, &flags).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.epochs, 4);
        assert_eq!(c.lambda1, 0.25);
        assert_eq!(c.lambda2, 0.1);
        let bad_env = vec![("PDFNET_SEEDS".to_string(), "1".to_string())];
        assert!(RunConfig::resolve(None, bad_env, &[]).is_err());
    }

    #[test]
    fn resolution_must_tile_the_grid() {
        let mut c = small();
        c.resolution = (128, 128);
        assert!(c.validate().is_err());
        c.grid = 4;
        c.validate().unwrap();
    }
}
