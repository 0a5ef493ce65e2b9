//! Flat key-value run configuration read from a TOML file.
//!
//! ```toml
//! data_dir = "data"
//! checkpoint = "model.nckp"
//! frame_h = 16
//! frame_w = 16
//! input_frames = 6
//! output_frames = 6
//! blocks = "8x3,8x3"
//! strict_arch = false
//! epochs = 25
//! ```

use std::path::{Path, PathBuf};

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use crate::data::fetch::FetchConfig;
use crate::data::sequence::SequenceLayout;
use crate::data::synth::{SynthConfig, Velocity};
use crate::error::{Error, FormatError, Result};
use crate::model::{ArchitectureConfig, BlockConfig, InferenceMode, TrainOptions};
use crate::optim::AdadeltaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Paths.
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,

    // Architecture.
    pub input_frames: usize,
    pub output_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    /// Comma-separated `FILTERSxKERNEL` per ConvLSTM block.
    pub blocks: String,
    pub head_kernel_size: usize,
    /// `direct` or `autoregressive`.
    pub inference_mode: String,
    pub peephole: bool,
    pub strict_arch: bool,
    pub leaky_relu_alpha: f64,
    pub bn_momentum: f64,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub rho: f64,
    pub adadelta_eps: f64,
    pub lr_scale: f64,

    // Data.
    pub cadence_minutes: i64,
    pub stride: usize,
    pub val_fraction: f64,

    // Synthetic data.
    pub synth_sequences: usize,
    pub synth_blobs: usize,
    pub synth_vx: f64,
    pub synth_vy: f64,
    pub synth_noise: f64,

    // Live fetching.
    pub base_url: String,
    pub api_key_header: String,
    pub file_template: String,
    pub budget_per_hour: u32,

    // Rendering.
    pub gif_delay_ms: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchitectureConfig::default();
        let adadelta = AdadeltaConfig::default();
        let fetch = FetchConfig::new("", "");
        let synth = SynthConfig::default();
        RunConfig {
            data_dir: "data".into(),
            cache_dir: "cache".into(),
            checkpoint: "model.nckp".into(),
            output_dir: "out".into(),
            input_frames: arch.input_frames,
            output_frames: arch.output_frames,
            frame_h: arch.frame_h,
            frame_w: arch.frame_w,
            blocks: format_blocks(&arch.blocks),
            head_kernel_size: arch.head_kernel_size,
            inference_mode: "direct".into(),
            peephole: arch.peephole,
            strict_arch: arch.strict_arch,
            leaky_relu_alpha: arch.leaky_relu_alpha,
            bn_momentum: arch.bn_momentum,
            epochs: TrainOptions::default().epochs,
            batch_size: 1,
            seed: 0,
            shuffle: true,
            rho: adadelta.rho,
            adadelta_eps: adadelta.eps,
            lr_scale: adadelta.lr_scale,
            cadence_minutes: 5,
            stride: 1,
            val_fraction: 0.1,
            synth_sequences: 16,
            synth_blobs: synth.blobs,
            synth_vx: 1.0,
            synth_vy: 0.0,
            synth_noise: 0.0,
            base_url: String::new(),
            api_key_header: fetch.api_key_header,
            file_template: fetch.file_template,
            budget_per_hour: fetch.budget_per_hour,
            gif_delay_ms: crate::render::DEFAULT_GIF_DELAY_MS,
        }
    }
}

pub fn parse_blocks(s: &str) -> Result<Vec<BlockConfig>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            let (f, k) = part
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::InvalidConfig(format!("block {part:?} is not FILTERSxKERNEL")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("block {part:?} is not FILTERSxKERNEL")))
            };
            Ok(BlockConfig {
                filters: num(f)?,
                kernel_size: num(k)?,
            })
        })
        .collect()
}

pub fn format_blocks(blocks: &[BlockConfig]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}x{}", b.filters, b.kernel_size))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FormatError::Malformed(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if self.cadence_minutes <= 0 {
            return Err(Error::InvalidConfig("cadence_minutes must be positive".into()));
        }
        self.arch()?.validate()?;
        self.adadelta().validate()
    }

    pub fn arch(&self) -> Result<ArchitectureConfig> {
        let inference_mode = match self.inference_mode.as_str() {
            "direct" => InferenceMode::DirectMapped,
            "autoregressive" => InferenceMode::Autoregressive,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "inference_mode {other:?} must be \"direct\" or \"autoregressive\""
                )))
            }
        };
        Ok(ArchitectureConfig {
            input_frames: self.input_frames,
            output_frames: self.output_frames,
            frame_h: self.frame_h,
            frame_w: self.frame_w,
            blocks: parse_blocks(&self.blocks)?,
            head_kernel_size: self.head_kernel_size,
            inference_mode,
            peephole: self.peephole,
            strict_arch: self.strict_arch,
            leaky_relu_alpha: self.leaky_relu_alpha,
            bn_momentum: self.bn_momentum,
            ..Default::default()
        })
    }

    pub fn adadelta(&self) -> AdadeltaConfig {
        AdadeltaConfig {
            rho: self.rho,
            eps: self.adadelta_eps,
            lr_scale: self.lr_scale,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            shuffle: self.shuffle,
            start_epoch: 0,
        }
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            input_frames: self.input_frames,
            output_frames: self.output_frames,
            cadence: TimeDelta::minutes(self.cadence_minutes),
            stride: self.stride,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            frame_h: self.frame_h,
            frame_w: self.frame_w,
            blobs: self.synth_blobs,
            velocity: Velocity::Fixed {
                vx: self.synth_vx,
                vy: self.synth_vy,
            },
            noise: self.synth_noise,
            seed: self.seed,
            layout: self.layout(),
            ..Default::default()
        }
    }

    pub fn fetch(&self) -> FetchConfig {
        let mut f = FetchConfig::new(self.base_url.clone(), self.cache_dir.clone());
        f.api_key_header = self.api_key_header.clone();
        f.file_template = self.file_template.clone();
        f.budget_per_hour = self.budget_per_hour;
        f.cadence = TimeDelta::minutes(self.cadence_minutes);
        f
    }
}
