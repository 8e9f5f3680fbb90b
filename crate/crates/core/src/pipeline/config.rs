// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{ModelDims, RvqSettings, CODEC_HOP};
use crate::error::{PaceError, Result};
use crate::losses::LossWeights;

/// Environment variable that may name a configuration file.
pub const CONFIG_ENV: &str = "PACE_CONFIG";

/// Optimization schedule of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl ScheduleConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PaceError::config(format!("{name}.batch_size must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(PaceError::config(format!("{name}.learning_rate must be finite and ≥ 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of WAV files; the synthetic corpus is used when absent.
    pub wav_dir: Option<PathBuf>,
    pub timbres: usize,
    pub contours: usize,
    /// Clip length in seconds.
    pub duration: f64,
    pub noise_floor: f64,
    /// Every `test_stride`-th (timbre, contour) combination is held out.
    pub test_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            wav_dir: None,
            timbres: 12,
            contours: 20,
            duration: 2.0,
            noise_floor: 0.002,
            test_stride: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClubConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    /// Estimator fitting steps per encoder step.
    pub fit_steps: usize,
    /// Frames subsampled from each utterance for the contrastive batch.
    pub frames_per_utterance: usize,
}

impl Default for ClubConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            learning_rate: 1e-4,
            fit_steps: 5,
            frames_per_utterance: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub learning_rate: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Length of the random training crops, a multiple of 320 samples.
    pub segment_samples: usize,
    /// Weight of the waveform L1 term in reference-codec training.
    pub waveform_weight: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Number of clips whose encoder outputs seed the k-means codebooks.
    pub kmeans_clips: usize,
    /// Held-out clips forming the fixed probe batch.
    pub probe_clips: usize,
    /// Step at which the early probe loss is recorded.
    pub probe_step: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            segment_samples: 48_000,
            waveform_weight: 1.0,
            grad_clip: 10.0,
            kmeans_clips: 64,
            probe_clips: 8,
            probe_step: 50,
        }
    }
}

/// Complete configuration. The default is the full-scale schedule; see
/// [`Config::desk`] for the toy-size preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelDims,
    pub rvq: RvqSettings,
    pub loss: LossWeights,
    pub reference: ScheduleConfig,
    pub stage1: ScheduleConfig,
    pub stage2: ScheduleConfig,
    pub stage3: ScheduleConfig,
    pub club: ClubConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainingConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("pace-out"),
            data: DataConfig::default(),
            model: ModelDims::default(),
            rvq: RvqSettings::default(),
            loss: LossWeights::default(),
            reference: ScheduleConfig {
                steps: 200_000,
                learning_rate: 3e-4,
                batch_size: 16,
            },
            stage1: ScheduleConfig {
                steps: 360_000,
                learning_rate: 3e-4,
                batch_size: 16,
            },
            stage2: ScheduleConfig {
                steps: 60_000,
                learning_rate: 3e-4,
                batch_size: 16,
            },
            stage3: ScheduleConfig {
                steps: 180_000,
                learning_rate: 1e-4,
                batch_size: 16,
            },
            club: ClubConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl Config {
    /// Toy model (widths ÷4) on the synthetic corpus with the
    /// 3000/1000/2000-step schedule.
    pub fn desk() -> Self {
        let model = ModelDims::toy();
        Self {
            club: ClubConfig {
                hidden: model.frame_dim(),
                ..ClubConfig::default()
            },
            model,
            reference: ScheduleConfig {
                steps: 3000,
                learning_rate: 1e-3,
                batch_size: 2,
            },
            stage1: ScheduleConfig {
                steps: 3000,
                learning_rate: 3e-4,
                batch_size: 2,
            },
            stage2: ScheduleConfig {
                steps: 1000,
                learning_rate: 3e-4,
                batch_size: 2,
            },
            stage3: ScheduleConfig {
                steps: 2000,
                learning_rate: 1e-4,
                batch_size: 2,
            },
            discriminator: DiscriminatorConfig {
                channels: 8,
                ..DiscriminatorConfig::default()
            },
            training: TrainingConfig {
                segment_samples: 9600,
                kmeans_clips: 32,
                ..TrainingConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::default()),
            other => Err(PaceError::config(format!("unknown preset {other:?} (desk, full)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| PaceError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PaceError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PaceError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        for (name, s) in [
            ("reference", &self.reference),
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("stage3", &self.stage3),
        ] {
            s.validate(name)?;
        }
        let seg = self.training.segment_samples;
        if seg == 0 || seg % CODEC_HOP != 0 {
            return Err(PaceError::config(format!(
                "training.segment_samples = {seg} must be a positive multiple of {CODEC_HOP}"
            )));
        }
        if self.club.frames_per_utterance < 2 || self.club.hidden == 0 {
            return Err(PaceError::config("club.frames_per_utterance must be ≥ 2 and club.hidden positive"));
        }
        if self.data.timbres == 0 || self.data.contours == 0 || self.data.test_stride < 2 {
            return Err(PaceError::config("data needs ≥ 1 timbre, ≥ 1 contour and test_stride ≥ 2"));
        }
        if !(self.data.duration > 0.0) || !(self.data.noise_floor >= 0.0) {
            return Err(PaceError::config("data.duration must be positive and data.noise_floor ≥ 0"));
        }
        if self.discriminator.channels == 0 {
            return Err(PaceError::config("discriminator.channels must be positive"));
        }
        Ok(())
    }
}
