use serde::{Deserialize, Serialize};

use crate::data::VALID_GRIDS;
use crate::error::{PdfnetError, Result};

/// Output strides of the four backbone stages.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    pub block_depths: [usize; 4],
    pub width_scale: f64,
}

impl BackboneConfig {
    pub fn small() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            block_depths: [1, 1, 1, 1],
            width_scale: 1.0,
        }
    }

    /// Channel widths after applying `width_scale` (never below 4).
    pub fn channels(&self) -> [usize; 4] {
        self.stage_channels.map(|c| ((c as f64 * self.width_scale).round() as usize).max(4))
    }

    pub fn stem_channels(&self) -> usize {
        (self.channels()[0] / 2).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels();
        if self.stage_channels.contains(&0) || ch.windows(2).any(|w| w[1] < w[0]) {
            return Err(PdfnetError::Config(format!(
                "backbone channels must be positive and non-decreasing, got {:?}",
                self.stage_channels
            )));
        }
        if !(self.width_scale > 0.0) {
            return Err(PdfnetError::Config("width_scale must be positive".into()));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128, 256],
            block_depths: [1, 1, 2, 1],
            width_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    /// Width multiplier of the patch encoder relative to the main encoder.
    pub patch_width_scale: f64,
    pub share_patch_encoder: bool,
    pub decoder_channels: usize,
    /// Width of the full-resolution merging layers.
    pub merge_channels: usize,
    pub head_count: usize,
    /// Side of the pooled token grid used by the FSE attention.
    pub token_res: usize,
    pub grid: usize,
    pub tau: f64,
    pub zero_init_coa: bool,
    /// Initial value of the per-stage gates on the depth stream entering the decoder.
    pub depth_gate_init: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            patch_width_scale: 0.5,
            share_patch_encoder: false,
            decoder_channels: 64,
            merge_channels: 16,
            head_count: 4,
            token_res: 32,
            grid: 8,
            tau: 0.1,
            zero_init_coa: true,
            depth_gate_init: 1.0,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale configuration used by tests and smoke runs.
    pub fn small() -> Self {
        Self {
            backbone: BackboneConfig::small(),
            decoder_channels: 16,
            merge_channels: 8,
            token_res: 8,
            ..Self::default()
        }
    }

    pub fn patch_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            width_scale: self.backbone.width_scale * self.patch_width_scale,
            ..self.backbone.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if !VALID_GRIDS.contains(&self.grid) {
            return Err(PdfnetError::Config(format!("grid {} not in {VALID_GRIDS:?}", self.grid)));
        }
        if self.head_count == 0 || !self.decoder_channels.is_multiple_of(self.head_count) {
            return Err(PdfnetError::Config(format!(
                "decoder_channels {} must be divisible by head_count {}",
                self.decoder_channels, self.head_count
            )));
        }
        if self.merge_channels == 0 || self.token_res == 0 {
            return Err(PdfnetError::Config("merge_channels and token_res must be positive".into()));
        }
        if !(self.patch_width_scale > 0.0) {
            return Err(PdfnetError::Config("patch_width_scale must be positive".into()));
        }
        Ok(())
    }

    /// Inputs must tile into `grid×grid` patches that survive the stride-32 backbone.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let unit = 32 * self.grid;
        if h == 0 || w == 0 || !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return Err(PdfnetError::shape(format!(
                "input {h}x{w} must be divisible by 32*grid = {unit}"
            )));
        }
        Ok(())
    }
}
