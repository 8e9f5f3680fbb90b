// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! The split convolutional codec: a stage-1 encoder producing frame
//! embeddings at hop 40, prosody fusion, a stage-2 encoder down to hop 320,
//! the scale layer, residual vector quantization and the decoder.

mod container;
mod model;
mod network;
mod rvq;
mod scale;

use serde::{Deserialize, Serialize};

use crate::error::{PaceError, Result};
use crate::prosody::ProsodyEmbeddings;
use crate::tensor::Tensor;

pub use container::{read_codes, write_codes, CODES_MAGIC, CODES_VERSION};
pub use model::{PaceCodec, PaceOutput, ReferenceCodec, ReferenceOutput, Through};
pub use network::{Decoder, DecoderBlock, EncoderBlock, ResidualUnit, Stage1Encoder, Stage2Encoder};
pub use rvq::{ResidualVq, RvqOutput, RvqSettings, RvqStats};
pub use scale::ScaleLayer;

pub const SAMPLE_RATE: u32 = 24_000;
/// Samples per stage-1 frame (strides 2 · 4 · 5).
pub const FRAME_HOP: usize = 40;
/// Samples per codec frame (stage-1 hop times the stage-2 stride 8).
pub const CODEC_HOP: usize = 320;
pub const STAGE1_STRIDES: [usize; 3] = [2, 4, 5];
pub const STAGE2_STRIDE: usize = 8;

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Checks that the clip can pass through the codec: 24 kHz, non-empty,
    /// and a whole number of codec frames.
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(PaceError::config(format!(
                "codec runs at {SAMPLE_RATE} Hz, clip is {} Hz",
                self.sample_rate
            )));
        }
        if self.samples.is_empty() || self.samples.len() % CODEC_HOP != 0 {
            return Err(PaceError::contract(format!(
                "clip length {} is not a positive multiple of {CODEC_HOP}",
                self.samples.len()
            )));
        }
        Ok(())
    }

    /// The waveform as a `1 × L` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.samples.clone(), &[1, self.samples.len()]).expect("shape matches")
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.to_vec(), SAMPLE_RATE)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Architecture sizes. The defaults are the full-size model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub stem_channels: usize,
    /// Output widths of the three stage-1 blocks; the last is the frame
    /// embedding width shared with the prosody tables.
    pub block_channels: [usize; 3],
    pub codec_dim: usize,
    pub scale_hidden: usize,
    pub codebook_size: usize,
    pub codebook_stages: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            block_channels: [64, 128, 256],
            codec_dim: 128,
            scale_hidden: 64,
            codebook_size: 1024,
            codebook_stages: 8,
        }
    }
}

impl ModelDims {
    /// All widths divided by four; codebook geometry unchanged.
    pub fn toy() -> Self {
        Self {
            stem_channels: 8,
            block_channels: [16, 32, 64],
            codec_dim: 32,
            scale_hidden: 16,
            codebook_size: 1024,
            codebook_stages: 8,
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.block_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.stem_channels, self.codec_dim, self.scale_hidden, self.codebook_stages];
        if widths.contains(&0) || self.block_channels.contains(&0) {
            return Err(PaceError::config("model widths must be positive"));
        }
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize + 1 {
            return Err(PaceError::config(format!(
                "codebook size {} must lie in 2..=65536",
                self.codebook_size
            )));
        }
        Ok(())
    }
}

/// Stage-1 encoder output, `frames × dim` at hop 40.
#[derive(Clone, Debug)]
pub struct FrameEmbedding {
    pub values: Tensor,
}

impl FrameEmbedding {
    pub fn frames(&self) -> usize {
        self.values.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.values.dim(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingVariant {
    PreScale,
    Scaled,
    Reference,
    Quantized,
}

/// RVQ-side embedding, `frames × codec_dim` at hop 320.
#[derive(Clone, Debug)]
pub struct CodecEmbedding {
    pub values: Tensor,
    pub variant: EmbeddingVariant,
}

impl CodecEmbedding {
    pub fn frames(&self) -> usize {
        self.values.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.values.dim(1)
    }
}

/// Discrete codes, one row of `stages` indices per codec frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AudioCodes {
    pub stages: usize,
    pub codes: Vec<Vec<u16>>,
}

impl AudioCodes {
    pub fn frames(&self) -> usize {
        self.codes.len()
    }

    pub fn flat(&self) -> Vec<u16> {
        self.codes.iter().flatten().copied().collect()
    }
}

/// Adds the prosody embeddings to the frame embedding.
pub fn fuse_prosody(e_f: &FrameEmbedding, pros: &ProsodyEmbeddings) -> Result<FrameEmbedding> {
    for (name, t) in [("e_f0", &pros.e_f0), ("e_uv", &pros.e_uv)] {
        if t.shape() != e_f.values.shape() {
            return Err(PaceError::contract(format!(
                "{name} has shape {:?} but the frame embedding is {:?}",
                t.shape(),
                e_f.values.shape()
            )));
        }
    }
    Ok(FrameEmbedding {
        values: e_f.values.add(&pros.e_f0)?.add(&pros.e_uv)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_validation() {
        assert!(AudioClip::new(vec![0.0; 640], SAMPLE_RATE).validate().is_ok());
        assert!(matches!(
            AudioClip::new(vec![0.0; 641], SAMPLE_RATE).validate(),
            Err(PaceError::Contract(_))
        ));
        assert!(matches!(
            AudioClip::new(vec![0.0; 640], 16_000).validate(),
            Err(PaceError::Config(_))
        ));
    }

    #[test]
    fn fusion_is_additive() {
        let e = FrameEmbedding {
            values: Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap(),
        };
        let p = ProsodyEmbeddings {
            e_f0: Tensor::new(vec![0.5; 4], &[2, 2]).unwrap(),
            e_uv: Tensor::new(vec![-1.0; 4], &[2, 2]).unwrap(),
        };
        let fused = fuse_prosody(&e, &p).unwrap();
        assert_eq!(fused.values.to_vec(), vec![0.5, 1.5, 2.5, 3.5]);
        let zero = fuse_prosody(&e, &ProsodyEmbeddings::zeros(2, 2)).unwrap();
        assert_eq!(zero.values.to_vec(), e.values.to_vec());
        let short = ProsodyEmbeddings::zeros(1, 2);
        assert!(matches!(fuse_prosody(&e, &short), Err(PaceError::Contract(_))));
    }
}
