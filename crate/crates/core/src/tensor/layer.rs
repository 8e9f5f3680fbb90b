// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::StandardNormal;

use super::{conv1d, conv_transpose1d, linear, Tensor};
use crate::error::{PaceError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d,
    ConvTranspose1d,
    Linear,
    Embedding,
}

/// A parameterized layer and the hyper-parameters that shape it.
///
/// Weight layouts:
/// * `Conv1d`: `channels_out × channels_in × kernel_size`
/// * `ConvTranspose1d`: `channels_in × channels_out × kernel_size`
/// * `Linear`: `channels_out × channels_in`
/// * `Embedding`: `vocabulary × dim`, with `channels_in` holding the vocabulary
///   size and `channels_out` the embedding dimension
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub channels_in: usize,
    pub channels_out: usize,
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl LayerParams {
    pub fn conv1d(
        channels_in: usize,
        channels_out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (3.0 / (channels_in * kernel_size) as f64).sqrt();
        let n = channels_out * channels_in * kernel_size;
        Self {
            kind: LayerKind::Conv1d,
            weight: Tensor::param(uniform(rng, n, bound), &[channels_out, channels_in, kernel_size])
                .expect("shape matches"),
            bias: Some(Tensor::param(vec![0.0; channels_out], &[channels_out]).expect("shape")),
            stride,
            kernel_size,
            padding,
            channels_in,
            channels_out,
        }
    }

    /// Downsampling convolution whose output length is exactly `T / stride`
    /// for `T` divisible by `stride`: kernel `stride + 2·⌈stride/2⌉` with
    /// symmetric padding `⌈stride/2⌉`.
    pub fn downsample(channels_in: usize, channels_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let pad = stride.div_ceil(2);
        Self::conv1d(channels_in, channels_out, stride + 2 * pad, stride, pad, rng)
    }

    pub fn conv_transpose1d(
        channels_in: usize,
        channels_out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (channels_in * kernel_size).div_ceil(stride.max(1));
        let bound = (3.0 / fan_in as f64).sqrt();
        let n = channels_in * channels_out * kernel_size;
        Self {
            kind: LayerKind::ConvTranspose1d,
            weight: Tensor::param(uniform(rng, n, bound), &[channels_in, channels_out, kernel_size])
                .expect("shape matches"),
            bias: Some(Tensor::param(vec![0.0; channels_out], &[channels_out]).expect("shape")),
            stride,
            kernel_size,
            padding,
            channels_in,
            channels_out,
        }
    }

    /// Mirror of [`LayerParams::downsample`]: output length exactly `T · stride`.
    pub fn upsample(channels_in: usize, channels_out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let pad = stride.div_ceil(2);
        Self::conv_transpose1d(channels_in, channels_out, stride + 2 * pad, stride, pad, rng)
    }

    pub fn linear(channels_in: usize, channels_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / channels_in as f64).sqrt();
        Self {
            kind: LayerKind::Linear,
            weight: Tensor::param(uniform(rng, channels_in * channels_out, bound), &[channels_out, channels_in])
                .expect("shape matches"),
            bias: Some(Tensor::param(vec![0.0; channels_out], &[channels_out]).expect("shape")),
            stride: 1,
            kernel_size: 1,
            padding: 0,
            channels_in,
            channels_out,
        }
    }

    /// Lookup table with entries drawn from `N(0, std²)`.
    pub fn embedding(vocabulary: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..vocabulary * dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            kind: LayerKind::Embedding,
            weight: Tensor::param(data, &[vocabulary, dim]).expect("shape matches"),
            bias: None,
            stride: 1,
            kernel_size: 1,
            padding: 0,
            channels_in: vocabulary,
            channels_out: dim,
        }
    }

    /// Rebuilds a layer around existing tensors, validating the weight layout.
    pub fn from_tensors(
        kind: LayerKind,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let s = weight.shape().to_vec();
        let (channels_in, channels_out, kernel_size) = match (kind, s.as_slice()) {
            (LayerKind::Conv1d, &[o, i, k]) => (i, o, k),
            (LayerKind::ConvTranspose1d, &[i, o, k]) => (i, o, k),
            (LayerKind::Linear, &[o, i]) => (i, o, 1),
            (LayerKind::Embedding, &[v, d]) => (v, d, 1),
            _ => {
                return Err(PaceError::contract(format!(
                    "weight shape {s:?} does not fit a {kind:?} layer"
                )))
            }
        };
        if let Some(b) = &bias {
            if b.numel() != channels_out {
                return Err(PaceError::Dimension {
                    op: "layer bias",
                    axis: 0,
                    expected: channels_out,
                    found: b.numel(),
                });
            }
        }
        Ok(Self {
            kind,
            weight,
            bias,
            stride,
            kernel_size,
            padding,
            channels_in,
            channels_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref();
        match self.kind {
            LayerKind::Conv1d => conv1d(x, &self.weight, b, self.stride, self.padding),
            LayerKind::ConvTranspose1d => conv_transpose1d(x, &self.weight, b, self.stride, self.padding),
            LayerKind::Linear => linear(x, &self.weight, b),
            LayerKind::Embedding => Err(PaceError::contract("embedding layers take ids; use lookup")),
        }
    }

    /// Gathers embedding rows for `ids`, giving `ids.len() × dim`.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        if self.kind != LayerKind::Embedding {
            return Err(PaceError::contract("lookup on a non-embedding layer"));
        }
        self.weight.gather_rows(ids)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        std::iter::once(self.weight.clone()).chain(self.bias.clone()).collect()
    }

    /// Named parameters, prefixed with `name`.
    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut v = vec![(format!("{name}.weight"), self.weight.clone())];
        if let Some(b) = &self.bias {
            v.push((format!("{name}.bias"), b.clone()));
        }
        v
    }

    pub fn set_trainable(&self, flag: bool) {
        for p in self.parameters() {
            p.set_requires_grad(flag);
        }
    }
}
