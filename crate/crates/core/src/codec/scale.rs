// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use super::{CodecEmbedding, EmbeddingVariant, ModelDims};
use crate::error::{PaceError, Result};
use crate::tensor::{LayerKind, LayerParams, Tensor};

/// Per-utterance affine rescaling followed by a kernel-3 convolution:
/// `out = conv(K · x + B)`, where `K` and `B` each come from a convolution,
/// average pooling over all frames, and a linear map to one scalar.
#[derive(Clone, Debug)]
pub struct ScaleLayer {
    pub k_conv: LayerParams,
    pub k_linear: LayerParams,
    pub b_conv: LayerParams,
    pub b_linear: LayerParams,
    pub output: LayerParams,
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(vec![0.0; shape.iter().product()], shape).expect("shape matches")
}

impl ScaleLayer {
    pub fn new(dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let (d, h) = (dims.codec_dim, dims.scale_hidden);
        let layer = Self {
            k_conv: LayerParams::conv1d(d, h, 3, 1, 1, rng),
            k_linear: LayerParams::linear(h, 1, rng),
            b_conv: LayerParams::conv1d(d, h, 3, 1, 1, rng),
            b_linear: LayerParams::linear(h, 1, rng),
            output: LayerParams::conv1d(d, d, 3, 1, 1, rng),
        };
        // Start near K = 1 so the initial layer passes its input through.
        if let Some(b) = &layer.k_linear.bias {
            b.set_values(&[1.0]);
        }
        layer
    }

    /// K-branch fixed at 1, B-branch at 0 and an identity output kernel.
    pub fn identity(dim: usize, hidden: usize) -> Self {
        let branch = |bias: f64| {
            let conv = LayerParams::from_tensors(
                LayerKind::Conv1d,
                zeros_param(&[hidden, dim, 3]),
                Some(zeros_param(&[hidden])),
                1,
                1,
            )
            .expect("valid layout");
            let linear = LayerParams::from_tensors(
                LayerKind::Linear,
                zeros_param(&[1, hidden]),
                Some(Tensor::param(vec![bias], &[1]).expect("shape")),
                1,
                0,
            )
            .expect("valid layout");
            (conv, linear)
        };
        let (k_conv, k_linear) = branch(1.0);
        let (b_conv, b_linear) = branch(0.0);
        let mut w = vec![0.0; dim * dim * 3];
        for c in 0..dim {
            w[(c * dim + c) * 3 + 1] = 1.0;
        }
        let output = LayerParams::from_tensors(
            LayerKind::Conv1d,
            Tensor::param(w, &[dim, dim, 3]).expect("shape"),
            Some(zeros_param(&[dim])),
            1,
            1,
        )
        .expect("valid layout");
        Self {
            k_conv,
            k_linear,
            b_conv,
            b_linear,
            output,
        }
    }

    /// The scalars `(K, B)` for a `dim × T` input.
    pub fn factors_channels(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let k = self.k_linear.forward(&self.k_conv.forward(x)?.mean_last_axis())?;
        let b = self.b_linear.forward(&self.b_conv.forward(x)?.mean_last_axis())?;
        Ok((k, b))
    }

    /// `K · x + B` before the output convolution, for a `dim × T` input.
    pub fn affine_channels(&self, x: &Tensor) -> Result<Tensor> {
        let (k, b) = self.factors_channels(x)?;
        x.mul_scalar_tensor(&k)?.add_scalar_tensor(&b)
    }

    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.affine_channels(x)?)
    }

    pub fn forward(&self, pre: &CodecEmbedding) -> Result<CodecEmbedding> {
        if pre.dim() != self.output.channels_in {
            return Err(PaceError::Dimension {
                op: "scale_layer",
                axis: 1,
                expected: self.output.channels_in,
                found: pre.dim(),
            });
        }
        let y = self.forward_channels(&pre.values.transpose()?)?;
        Ok(CodecEmbedding {
            values: y.transpose()?,
            variant: EmbeddingVariant::Scaled,
        })
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut v = self.k_conv.named_parameters(&format!("{name}.k_conv"));
        v.extend(self.k_linear.named_parameters(&format!("{name}.k_linear")));
        v.extend(self.b_conv.named_parameters(&format!("{name}.b_conv")));
        v.extend(self.b_linear.named_parameters(&format!("{name}.b_linear")));
        v.extend(self.output.named_parameters(&format!("{name}.output")));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(values: Vec<f64>, frames: usize, dim: usize) -> CodecEmbedding {
        CodecEmbedding {
            values: Tensor::new(values, &[frames, dim]).unwrap(),
            variant: EmbeddingVariant::PreScale,
        }
    }

    #[test]
    fn identity_configuration_passes_input_through() {
        let layer = ScaleLayer::identity(4, 3);
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
        let out = layer.forward(&emb(x.clone(), 5, 4)).unwrap();
        assert_eq!(out.variant, EmbeddingVariant::Scaled);
        for (a, b) in out.values.values().iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = ModelDims::toy();
        let layer = ScaleLayer::new(&dims, &mut rng);
        let out = layer.forward(&emb(vec![0.1; 150 * 32], 150, 32)).unwrap();
        assert_eq!(out.values.shape(), &[150, 32]);
    }

    #[test]
    fn factors_depend_only_on_input_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = ScaleLayer::new(&ModelDims::toy(), &mut rng);
        let x: Vec<f64> = (0..32 * 6).map(|i| (i as f64).sin()).collect();
        let a = Tensor::new(x.clone(), &[32, 6]).unwrap();
        let b = Tensor::new(x, &[32, 6]).unwrap();
        let (ka, ba) = layer.factors_channels(&a).unwrap();
        let (kb, bb) = layer.factors_channels(&b).unwrap();
        assert_eq!(ka.item().to_bits(), kb.item().to_bits());
        assert_eq!(ba.item().to_bits(), bb.item().to_bits());
    }

    #[test]
    fn wrong_width_is_a_dimension_error() {
        let layer = ScaleLayer::identity(4, 2);
        let err = layer.forward(&emb(vec![0.0; 10], 2, 5)).unwrap_err();
        assert!(matches!(err, PaceError::Dimension { axis: 1, .. }));
    }
}
