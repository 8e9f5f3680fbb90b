// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use rand::Rng;

use super::stft::{stft_magnitude, StftGeometry};
use crate::error::Result;
use crate::tensor::{conv2d, Conv2dGeometry, Tensor};

pub const DISC_FFT: usize = 512;
pub const DISC_HOP: usize = 128;
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub geometry: Conv2dGeometry,
}

impl Conv2dLayer {
    fn new(c_in: usize, c_out: usize, stride: (usize, usize), zero: bool, rng: &mut impl Rng) -> Self {
        let n = c_out * c_in * 9;
        let bound = (3.0 / (c_in * 9) as f64).sqrt();
        let w = if zero {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        Self {
            weight: Tensor::param(w, &[c_out, c_in, 3, 3]).expect("shape"),
            bias: Tensor::param(vec![0.0; c_out], &[c_out]).expect("shape"),
            geometry: Conv2dGeometry {
                stride,
                padding: (1, 1),
            },
        }
    }

    fn forward(&self, x: &Tensor, constant: bool) -> Result<Tensor> {
        if constant {
            conv2d(x, &self.weight.detach(), Some(&self.bias.detach()), self.geometry)
        } else {
            conv2d(x, &self.weight, Some(&self.bias), self.geometry)
        }
    }
}

/// 2-D convolutional critic over the compressed magnitude spectrogram
/// `ln(1 + |STFT₅₁₂|)`, laid out as `1 × bins × frames`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<Conv2dLayer>,
    pub output: Conv2dLayer,
}

/// Logit map and the hidden activations used for feature matching.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

impl Discriminator {
    /// The output layer starts at zero, so an untrained critic scores every
    /// input 0.
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            Conv2dLayer::new(1, channels, (1, 1), false, rng),
            Conv2dLayer::new(channels, channels, (2, 2), false, rng),
            Conv2dLayer::new(channels, channels, (2, 2), false, rng),
        ];
        let output = Conv2dLayer::new(channels, 1, (1, 1), true, rng);
        Self { layers, output }
    }

    pub fn channels(&self) -> usize {
        self.output.weight.dim(1)
    }

    pub fn spectrogram(x: &Tensor) -> Result<Tensor> {
        let mag = stft_magnitude(x, StftGeometry::new(DISC_FFT, DISC_HOP)?)?;
        let (frames, bins) = (mag.dim(0), mag.dim(1));
        mag.add_scalar(1.0).ln().transpose()?.reshape(&[1, bins, frames])
    }

    /// With `constant`, the critic's parameters are cut from the graph so
    /// gradients reach only the input.
    pub fn forward(&self, x: &Tensor, constant: bool) -> Result<DiscOutput> {
        let mut h = Self::spectrogram(x)?;
        let mut features = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = l.forward(&h, constant)?.leaky_relu(SLOPE);
            features.push(h.clone());
        }
        let logits = self.output.forward(&h, constant)?;
        Ok(DiscOutput { logits, features })
    }

    pub fn named_parameters(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().chain(std::iter::once(&self.output)).enumerate() {
            v.push((format!("{name}.conv{i}.weight"), l.weight.clone()));
            v.push((format!("{name}.conv{i}.bias"), l.bias.clone()));
        }
        v
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters("").into_iter().map(|(_, t)| t).collect()
    }
}
