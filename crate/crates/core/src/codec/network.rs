// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use super::{
    AudioClip, CodecEmbedding, EmbeddingVariant, FrameEmbedding, ModelDims, FRAME_HOP, STAGE1_STRIDES,
    STAGE2_STRIDE,
};
use crate::error::{PaceError, Result};
use crate::tensor::{LayerParams, Tensor};

/// `x + conv₃(elu(x))`, channel count preserved.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv: LayerParams,
}

impl ResidualUnit {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: LayerParams::conv1d(channels, channels, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.add(&self.conv.forward(&x.elu())?)
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        self.conv.named_parameters(&format!("{name}.conv"))
    }
}

/// Residual unit followed by a strided downsampling convolution.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub residual: ResidualUnit,
    pub down: LayerParams,
    pub activate_output: bool,
}

impl EncoderBlock {
    pub fn new(
        channels_in: usize,
        channels_out: usize,
        stride: usize,
        activate_output: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            residual: ResidualUnit::new(channels_in, rng),
            down: LayerParams::downsample(channels_in, channels_out, stride, rng),
            activate_output,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.residual.forward(x)?.elu();
        let y = self.down.forward(&h)?;
        Ok(if self.activate_output { y.elu() } else { y })
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut v = self.residual.named_parameters(&format!("{name}.residual"));
        v.extend(self.down.named_parameters(&format!("{name}.down")));
        v
    }
}

fn collect(parts: Vec<Vec<(String, Tensor)>>) -> Vec<(String, Tensor)> {
    parts.into_iter().flatten().collect()
}

/// Stem convolution and the blocks with strides 2, 4 and 5.
#[derive(Clone, Debug)]
pub struct Stage1Encoder {
    pub stem: LayerParams,
    pub blocks: Vec<EncoderBlock>,
}

impl Stage1Encoder {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let stem = LayerParams::conv1d(1, dims.stem_channels, 7, 1, 3, rng);
        let mut blocks = Vec::with_capacity(3);
        let mut cin = dims.stem_channels;
        for (&cout, &stride) in dims.block_channels.iter().zip(&STAGE1_STRIDES) {
            blocks.push(EncoderBlock::new(cin, cout, stride, true, rng));
            cin = cout;
        }
        Self { stem, blocks }
    }

    /// `1 × L` waveform to `dim × L/40` features.
    pub fn forward_channels(&self, wave: &Tensor) -> Result<Tensor> {
        let len = wave.dim(1);
        if len == 0 || len % FRAME_HOP != 0 {
            return Err(PaceError::contract(format!(
                "stage-1 input length {len} is not a positive multiple of {FRAME_HOP}"
            )));
        }
        let mut h = self.stem.forward(wave)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }

    pub fn encode(&self, clip: &AudioClip) -> Result<FrameEmbedding> {
        let h = self.forward_channels(&clip.to_tensor())?;
        Ok(FrameEmbedding { values: h.transpose()? })
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut parts = vec![self.stem.named_parameters(&format!("{name}.stem"))];
        for (i, b) in self.blocks.iter().enumerate() {
            parts.push(b.named_parameters(&format!("{name}.block{i}")));
        }
        collect(parts)
    }
}

/// The stride-8 block from frame embeddings to codec embeddings.
#[derive(Clone, Debug)]
pub struct Stage2Encoder {
    pub block: EncoderBlock,
}

impl Stage2Encoder {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Self {
            block: EncoderBlock::new(dims.frame_dim(), dims.codec_dim, STAGE2_STRIDE, false, rng),
        }
    }

    /// `dim × T` to `codec_dim × T/8`.
    pub fn forward_channels(&self, h: &Tensor) -> Result<Tensor> {
        let frames = h.dim(1);
        if frames == 0 || frames % STAGE2_STRIDE != 0 {
            return Err(PaceError::contract(format!(
                "stage-2 input has {frames} frames, not a positive multiple of {STAGE2_STRIDE}"
            )));
        }
        self.block.forward(h)
    }

    pub fn encode(&self, fused: &FrameEmbedding) -> Result<CodecEmbedding> {
        let h = self.forward_channels(&fused.values.transpose()?)?;
        Ok(CodecEmbedding {
            values: h.transpose()?,
            variant: EmbeddingVariant::PreScale,
        })
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        self.block.named_parameters(&format!("{name}.block"))
    }
}

/// ELU, stride-`s` transposed convolution, residual unit.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub up: LayerParams,
    pub residual: ResidualUnit,
}

/// Mirror of the encoder: strides 8, 5, 4, 2 back to the waveform.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub input: LayerParams,
    pub blocks: Vec<DecoderBlock>,
    pub output: LayerParams,
}

impl Decoder {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let [b0, b1, b2] = dims.block_channels;
        let input = LayerParams::conv1d(dims.codec_dim, b2, 7, 1, 3, rng);
        let plan = [(b2, b2, 8), (b2, b1, 5), (b1, b0, 4), (b0, dims.stem_channels, 2)];
        let blocks = plan
            .iter()
            .map(|&(cin, cout, s)| DecoderBlock {
                up: LayerParams::upsample(cin, cout, s, rng),
                residual: ResidualUnit::new(cout, rng),
            })
            .collect();
        let output = LayerParams::conv1d(dims.stem_channels, 1, 7, 1, 3, rng);
        Self { input, blocks, output }
    }

    /// `codec_dim × T` to `1 × 320·T`.
    pub fn forward_channels(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(z)?;
        for b in &self.blocks {
            h = b.residual.forward(&b.up.forward(&h.elu())?)?;
        }
        self.output.forward(&h.elu())
    }

    /// Decodes to a `1 × L` waveform tensor (unclamped).
    pub fn decode_tensor(&self, emb: &CodecEmbedding) -> Result<Tensor> {
        self.forward_channels(&emb.values.transpose()?)
    }

    pub fn decode(&self, emb: &CodecEmbedding) -> Result<AudioClip> {
        Ok(AudioClip::from_tensor(&self.decode_tensor(emb)?))
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut parts = vec![self.input.named_parameters(&format!("{name}.input"))];
        for (i, b) in self.blocks.iter().enumerate() {
            parts.push(b.up.named_parameters(&format!("{name}.block{i}.up")));
            parts.push(b.residual.named_parameters(&format!("{name}.block{i}.residual")));
        }
        parts.push(self.output.named_parameters(&format!("{name}.output")));
        collect(parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SAMPLE_RATE;
    use crate::tensor::no_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ladder_shapes_toy() {
        let dims = ModelDims::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s1 = Stage1Encoder::new(&dims, &mut rng);
        let s2 = Stage2Encoder::new(&dims, &mut rng);
        let dec = Decoder::new(&dims, &mut rng);
        let clip = AudioClip::new((0..960).map(|i| (i as f64 * 0.01).sin()).collect(), SAMPLE_RATE);
        no_grad(|| {
            let e = s1.encode(&clip).unwrap();
            assert_eq!(e.values.shape(), &[24, 64]);
            let c = s2.encode(&e).unwrap();
            assert_eq!(c.values.shape(), &[3, 32]);
            assert_eq!(dec.decode(&c).unwrap().len(), 960);
        });
    }

    #[test]
    fn zero_waveform_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s1 = Stage1Encoder::new(&ModelDims::toy(), &mut rng);
        let e = s1.encode(&AudioClip::new(vec![0.0; 640], SAMPLE_RATE)).unwrap();
        assert!(e.values.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_lengths_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = ModelDims::toy();
        let s1 = Stage1Encoder::new(&dims, &mut rng);
        let s2 = Stage2Encoder::new(&dims, &mut rng);
        assert!(s1.encode(&AudioClip::new(vec![0.0; 100], SAMPLE_RATE)).is_err());
        let e = FrameEmbedding { values: Tensor::zeros(&[12, 64]) };
        assert!(matches!(s2.encode(&e), Err(PaceError::Contract(_))));
    }
}
