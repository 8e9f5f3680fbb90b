// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use super::{
    fuse_prosody, AudioClip, AudioCodes, CodecEmbedding, Decoder, EmbeddingVariant, FrameEmbedding, ModelDims,
    ResidualVq, RvqOutput, ScaleLayer, Stage1Encoder, Stage2Encoder,
};
use crate::error::{PaceError, Result};
use crate::prosody::{ProsodyEmbedder, ProsodyEmbeddings, ProsodyFeatures};
use crate::tensor::Tensor;

/// Standard deviation of freshly drawn codebook entries before k-means
/// initialization replaces them.
const CODEBOOK_INIT_STD: f64 = 0.1;

/// Plain codec: four-block encoder, quantizer and decoder, no prosody path.
#[derive(Clone, Debug)]
pub struct ReferenceCodec {
    pub dims: ModelDims,
    pub stage1: Stage1Encoder,
    pub stage2: Stage2Encoder,
    pub rvq: ResidualVq,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct ReferenceOutput {
    pub embedding: CodecEmbedding,
    pub rvq: RvqOutput,
    /// `1 × L` reconstruction.
    pub audio: Tensor,
}

impl ReferenceCodec {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Self {
            dims: dims.clone(),
            stage1: Stage1Encoder::new(dims, rng),
            stage2: Stage2Encoder::new(dims, rng),
            rvq: ResidualVq::new(dims.codebook_stages, dims.codebook_size, dims.codec_dim, CODEBOOK_INIT_STD, rng),
            decoder: Decoder::new(dims, rng),
        }
    }

    /// The target embedding `e^c`, `frames × codec_dim`.
    pub fn encode(&self, clip: &AudioClip) -> Result<CodecEmbedding> {
        clip.validate()?;
        let h = self.stage1.forward_channels(&clip.to_tensor())?;
        let z = self.stage2.forward_channels(&h)?;
        Ok(CodecEmbedding {
            values: z.transpose()?,
            variant: EmbeddingVariant::Reference,
        })
    }

    pub fn forward(&self, clip: &AudioClip) -> Result<ReferenceOutput> {
        let embedding = self.encode(clip)?;
        let rvq = self.rvq.quantize(&embedding)?;
        let audio = self.decoder.decode_tensor(&rvq.quantized)?;
        Ok(ReferenceOutput { embedding, rvq, audio })
    }

    pub fn encoder_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = self.stage1.named_parameters("reference.stage1");
        v.extend(self.stage2.named_parameters("reference.stage2"));
        v
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = self.encoder_parameters();
        v.extend(self.decoder.named_parameters("reference.decoder"));
        v
    }

    pub fn named_state(&self) -> Vec<(String, Tensor)> {
        let mut v = self.named_parameters();
        v.extend(self.rvq.named_state("reference.rvq"));
        v
    }

    pub fn set_trainable(&self, flag: bool) {
        for (_, p) in self.named_parameters() {
            p.set_requires_grad(flag);
        }
    }
}

/// How far [`PaceCodec::forward`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Through {
    Scale,
    Quantize,
    Decode,
}

#[derive(Clone, Debug)]
pub struct PaceOutput {
    pub e_f: FrameEmbedding,
    pub prosody: Option<ProsodyEmbeddings>,
    pub pre_scale: CodecEmbedding,
    pub scaled: CodecEmbedding,
    pub rvq: Option<RvqOutput>,
    pub audio: Option<Tensor>,
}

/// The prosody-aware codec: split encoder with prosody fusion, scale layer,
/// quantizer and decoder.
#[derive(Clone, Debug)]
pub struct PaceCodec {
    pub dims: ModelDims,
    pub stage1: Stage1Encoder,
    pub stage2: Stage2Encoder,
    pub scale: ScaleLayer,
    pub prosody: ProsodyEmbedder,
    pub rvq: ResidualVq,
    pub decoder: Decoder,
}

impl PaceCodec {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        Self {
            dims: dims.clone(),
            stage1: Stage1Encoder::new(dims, rng),
            stage2: Stage2Encoder::new(dims, rng),
            scale: ScaleLayer::new(dims, rng),
            prosody: ProsodyEmbedder::new(dims.frame_dim(), rng),
            rvq: ResidualVq::new(dims.codebook_stages, dims.codebook_size, dims.codec_dim, CODEBOOK_INIT_STD, rng),
            decoder: Decoder::new(dims, rng),
        }
    }

    /// Fresh encoder and scale layer with the quantizer and decoder copied
    /// from a trained reference codec, so that emitted codes address the
    /// reference code space.
    pub fn from_reference(reference: &ReferenceCodec, rng: &mut impl Rng) -> Self {
        let mut codec = Self::new(&reference.dims, rng);
        codec.rvq = reference.rvq.clone();
        codec.decoder = deep_copy_decoder(&reference.decoder);
        codec
    }

    pub fn encode_stage1(&self, clip: &AudioClip) -> Result<FrameEmbedding> {
        clip.validate()?;
        self.stage1.encode(clip)
    }

    pub fn embed_prosody(&self, features: &ProsodyFeatures) -> Result<ProsodyEmbeddings> {
        self.prosody.embed(features)
    }

    /// Runs the codec on `clip`. With `features = None` the prosody
    /// embeddings are omitted (zero), as in the first training stage.
    pub fn forward(&self, clip: &AudioClip, features: Option<&ProsodyFeatures>, through: Through) -> Result<PaceOutput> {
        let e_f = self.encode_stage1(clip)?;
        let prosody = match features {
            Some(f) => {
                if f.len() != e_f.frames() {
                    return Err(PaceError::contract(format!(
                        "prosody has {} frames, the clip has {}",
                        f.len(),
                        e_f.frames()
                    )));
                }
                Some(self.embed_prosody(f)?)
            }
            None => None,
        };
        let fused = match &prosody {
            Some(p) => fuse_prosody(&e_f, p)?,
            None => e_f.clone(),
        };
        let pre_scale = self.stage2.encode(&fused)?;
        let scaled = self.scale.forward(&pre_scale)?;
        let rvq = if through >= Through::Quantize {
            Some(self.rvq.quantize(&scaled)?)
        } else {
            None
        };
        let audio = match (&rvq, through) {
            (Some(q), Through::Decode) => Some(self.decoder.decode_tensor(&q.quantized)?),
            _ => None,
        };
        Ok(PaceOutput {
            e_f,
            prosody,
            pre_scale,
            scaled,
            rvq,
            audio,
        })
    }

    pub fn encode_codes(&self, clip: &AudioClip, features: &ProsodyFeatures) -> Result<AudioCodes> {
        let out = self.forward(clip, Some(features), Through::Quantize)?;
        Ok(out.rvq.expect("quantized").codes)
    }

    pub fn decode_codes(&self, codes: &AudioCodes) -> Result<AudioClip> {
        self.decoder.decode(&self.rvq.dequantize(codes)?)
    }

    pub fn stage1_parameters(&self) -> Vec<(String, Tensor)> {
        self.stage1.named_parameters("pace.stage1")
    }

    pub fn stage2_parameters(&self) -> Vec<(String, Tensor)> {
        self.stage2.named_parameters("pace.stage2")
    }

    pub fn scale_parameters(&self) -> Vec<(String, Tensor)> {
        self.scale.named_parameters("pace.scale")
    }

    pub fn prosody_parameters(&self) -> Vec<(String, Tensor)> {
        self.prosody.named_parameters()
    }

    pub fn decoder_parameters(&self) -> Vec<(String, Tensor)> {
        self.decoder.named_parameters("pace.decoder")
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = self.stage1_parameters();
        v.extend(self.stage2_parameters());
        v.extend(self.scale_parameters());
        v.extend(self.prosody_parameters());
        v.extend(self.decoder_parameters());
        v
    }

    pub fn named_state(&self) -> Vec<(String, Tensor)> {
        let mut v = self.named_parameters();
        v.extend(self.rvq.named_state("pace.rvq"));
        v
    }
}

fn deep_copy_decoder(d: &Decoder) -> Decoder {
    let mut copy = d.clone();
    let mut layers = vec![&mut copy.input, &mut copy.output];
    for b in &mut copy.blocks {
        layers.push(&mut b.up);
        layers.push(&mut b.residual.conv);
    }
    for l in layers {
        l.weight = l.weight.deep_clone_param();
        l.bias = l.bias.as_ref().map(Tensor::deep_clone_param);
    }
    copy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SAMPLE_RATE;
    use crate::tensor::no_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_copy_does_not_alias_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let reference = ReferenceCodec::new(&ModelDims::toy(), &mut rng);
        let pace = PaceCodec::from_reference(&reference, &mut rng);
        let before = reference.decoder.input.weight.to_vec();
        pace.decoder.input.weight.update_values(|v| v[0] += 1.0);
        assert_eq!(reference.decoder.input.weight.to_vec(), before);
    }

    #[test]
    fn full_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pace = PaceCodec::new(&ModelDims::toy(), &mut rng);
        let clip = AudioClip::new((0..640).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(), SAMPLE_RATE);
        let feats = ProsodyFeatures::from_raw(vec![120.0; 16], vec![1; 16]).unwrap();
        let out = no_grad(|| pace.forward(&clip, Some(&feats), Through::Decode)).unwrap();
        assert_eq!(out.e_f.values.shape(), &[16, 64]);
        assert_eq!(out.scaled.values.shape(), &[2, 32]);
        assert_eq!(out.rvq.unwrap().codes.codes.len(), 2);
        assert_eq!(out.audio.unwrap().shape(), &[1, 640]);
        let short = feats.fit_to(15);
        assert!(pace.forward(&clip, Some(&short), Through::Scale).is_err());
    }
}
