// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Training objectives: embedding reconstruction, multi-scale spectral
//! reconstruction, hinge adversarial and feature-matching losses, and the
//! weighted generator total.

mod discriminator;
mod stft;

use serde::{Deserialize, Serialize};

use crate::codec::{AudioClip, CodecEmbedding};
use crate::error::{PaceError, Result};
use crate::tensor::{no_grad, Tensor};

pub use discriminator::{Conv2dLayer, DiscOutput, Discriminator, DISC_FFT, DISC_HOP};
pub use stft::{hann, stft_magnitude, StftGeometry, MAGNITUDE_FLOOR};

pub const SPECTRAL_SCALES: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
/// Offset inside the logarithm of the log-magnitude term.
pub const LOG_OFFSET: f64 = 1e-5;

/// Mean squared error between the scaled and the reference codec embedding.
pub fn recon_embedding_loss(e_hat: &CodecEmbedding, e_ref: &CodecEmbedding) -> Result<Tensor> {
    if e_hat.values.shape() != e_ref.values.shape() {
        return Err(PaceError::contract(format!(
            "embedding shapes differ: {:?} vs {:?}",
            e_hat.values.shape(),
            e_ref.values.shape()
        )));
    }
    Ok(e_hat.values.sub(&e_ref.values.detach())?.square().mean())
}

/// Sum over window sizes `s` of the frame-averaged
/// `‖|S| − |Ŝ|‖₁ + ‖ln|S| − ln|Ŝ|‖₂`, hop `s/4`.
pub fn spectral_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.numel() != x_hat.numel() {
        return Err(PaceError::contract(format!(
            "spectral loss on lengths {} and {}",
            x.numel(),
            x_hat.numel()
        )));
    }
    let mut terms = Vec::with_capacity(SPECTRAL_SCALES.len());
    for s in SPECTRAL_SCALES {
        let g = StftGeometry::new(s, s / 4)?;
        let a = stft_magnitude(x, g)?;
        let b = stft_magnitude(x_hat, g)?;
        let frames = a.dim(0) as f64;
        let lin = a.sub(&b)?.abs().sum();
        let log = a
            .add_scalar(LOG_OFFSET)
            .ln()
            .sub(&b.add_scalar(LOG_OFFSET).ln())?
            .row_l2_norm()?
            .sum();
        terms.push(lin.add(&log)?.scale(1.0 / frames));
    }
    Tensor::sum_all(&terms)
}

/// [`spectral_loss`] between two clips, without recording gradients.
pub fn spectral_distance(x: &AudioClip, x_hat: &AudioClip) -> Result<f64> {
    no_grad(|| Ok(spectral_loss(&x.to_tensor(), &x_hat.to_tensor())?.item()))
}

#[derive(Clone, Debug)]
pub struct AdversarialLosses {
    /// `−mean D(x̂)`; reaches the generator only.
    pub adv: Tensor,
    /// Mean over critic layers of `mean|Fₗ(x) − Fₗ(x̂)| / mean|Fₗ(x)|`; reaches the generator only.
    pub feat: Tensor,
    /// `mean relu(1 − D(x)) + mean relu(1 + D(x̂))`; reaches the critic only.
    pub disc: Tensor,
}

/// Hinge losses for one real/generated pair (`1 × L` waveforms).
pub fn adversarial_losses(disc: &Discriminator, x: &Tensor, x_hat: &Tensor) -> Result<AdversarialLosses> {
    if x.numel() != x_hat.numel() {
        return Err(PaceError::contract(format!(
            "adversarial loss on lengths {} and {}",
            x.numel(),
            x_hat.numel()
        )));
    }
    let real = x.detach();
    let fake_g = disc.forward(x_hat, true)?;
    let real_g = disc.forward(&real, true)?;
    let adv = fake_g.logits.mean().neg();
    let mut feats = Vec::with_capacity(fake_g.features.len());
    for (fr, ff) in real_g.features.iter().zip(&fake_g.features) {
        let norm = fr.values().iter().map(|v| v.abs()).sum::<f64>() / fr.numel() as f64;
        feats.push(ff.sub(fr)?.abs().mean().scale(1.0 / (norm + 1e-8)));
    }
    let feat = Tensor::sum_all(&feats)?.scale(1.0 / feats.len().max(1) as f64);

    let real_d = disc.forward(&real, false)?;
    let fake_d = disc.forward(&x_hat.detach(), false)?;
    let disc_loss = real_d
        .logits
        .neg()
        .add_scalar(1.0)
        .relu()
        .mean()
        .add(&fake_d.logits.add_scalar(1.0).relu().mean())?;
    Ok(AdversarialLosses {
        adv,
        feat,
        disc: disc_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mi: f64,
    pub lambda_recon_e: f64,
    pub lambda_adv: f64,
    pub lambda_feat: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mi: 0.01,
            lambda_recon_e: 10.0,
            lambda_adv: 1.0,
            lambda_feat: 2.0,
            lambda_rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(PaceError::config(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("lambda_mi", self.lambda_mi),
            ("lambda_recon_e", self.lambda_recon_e),
            ("lambda_adv", self.lambda_adv),
            ("lambda_feat", self.lambda_feat),
            ("lambda_rec", self.lambda_rec),
        ]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda_mi: self.lambda_mi * c,
            lambda_recon_e: self.lambda_recon_e * c,
            lambda_adv: self.lambda_adv * c,
            lambda_feat: self.lambda_feat * c,
            lambda_rec: self.lambda_rec * c,
        }
    }
}

/// Generator loss components; `None` marks a component that is switched off.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub mi: Option<Tensor>,
    pub recon_e: Option<Tensor>,
    pub adv: Option<Tensor>,
    pub feat: Option<Tensor>,
    pub rec: Option<Tensor>,
}

/// `λ_MI·L_MI + λ_recon·L_recon^e + λ_adv·L_adv + λ_feat·L_feat + λ_rec·L_rec`
/// over the components present.
pub fn total_generator_loss(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let weighted: Vec<Tensor> = [
        (&parts.mi, w.lambda_mi),
        (&parts.recon_e, w.lambda_recon_e),
        (&parts.adv, w.lambda_adv),
        (&parts.feat, w.lambda_feat),
        (&parts.rec, w.lambda_rec),
    ]
    .into_iter()
    .filter_map(|(t, l)| t.as_ref().map(|t| t.scale(l)))
    .collect();
    if weighted.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    Tensor::sum_all(&weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{EmbeddingVariant, SAMPLE_RATE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn emb(v: Vec<f64>, variant: EmbeddingVariant) -> CodecEmbedding {
        let n = v.len();
        CodecEmbedding {
            values: Tensor::new(v, &[n / 2, 2]).unwrap(),
            variant,
        }
    }

    fn sine(hz: f64, n: usize) -> AudioClip {
        AudioClip::new(
            (0..n).map(|i| 0.5 * (TAU * hz * i as f64 / SAMPLE_RATE as f64).sin()).collect(),
            SAMPLE_RATE,
        )
    }

    #[test]
    fn recon_examples() {
        let a = emb(vec![0.1, 0.2, 0.3, 0.4], EmbeddingVariant::Scaled);
        let b = emb(vec![1.1, 1.2, 1.3, 1.4], EmbeddingVariant::Reference);
        assert_eq!(recon_embedding_loss(&a, &a).unwrap().item(), 0.0);
        assert!((recon_embedding_loss(&a, &b).unwrap().item() - 1.0).abs() < 1e-12);
        let c = emb(vec![0.0; 6], EmbeddingVariant::Reference);
        assert!(matches!(recon_embedding_loss(&a, &c), Err(PaceError::Contract(_))));
    }

    #[test]
    fn spectral_identity_symmetry_and_ordering() {
        let a = sine(220.0, 24_000);
        let b = sine(440.0, 24_000);
        let c = sine(225.0, 24_000);
        assert_eq!(spectral_distance(&a, &a).unwrap(), 0.0);
        let ab = spectral_distance(&a, &b).unwrap();
        assert_eq!(ab, spectral_distance(&b, &a).unwrap());
        let ac = spectral_distance(&a, &c).unwrap();
        assert!(ab > 0.0 && ab > ac, "{ab} vs {ac}");
        let short = sine(220.0, 100);
        assert!(spectral_distance(&a, &short).is_err());
    }

    #[test]
    fn zero_critic_hinge_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let disc = Discriminator::new(4, &mut rng);
        let x = sine(200.0, 2048).to_tensor();
        let y = sine(300.0, 2048).to_tensor();
        let l = adversarial_losses(&disc, &x, &y).unwrap();
        assert_eq!(l.disc.item(), 2.0);
        assert_eq!(l.adv.item(), 0.0);
        let same = adversarial_losses(&disc, &x, &x).unwrap();
        assert_eq!(same.feat.item(), 0.0);
    }

    #[test]
    fn weights_and_total() {
        let parts = LossParts {
            mi: Some(Tensor::scalar(0.5)),
            recon_e: Some(Tensor::scalar(2.0)),
            adv: Some(Tensor::scalar(-0.25)),
            feat: Some(Tensor::scalar(1.5)),
            rec: Some(Tensor::scalar(3.0)),
        };
        let zero = LossWeights::default().scaled(0.0);
        assert_eq!(total_generator_loss(&parts, &zero).unwrap().item(), 0.0);
        let only_feat = LossWeights {
            lambda_feat: 1.0,
            ..zero.clone()
        };
        assert_eq!(total_generator_loss(&parts, &only_feat).unwrap().item(), 1.5);
        let w = LossWeights::default();
        let one = total_generator_loss(&parts, &w).unwrap().item();
        let two = total_generator_loss(&parts, &w.scaled(2.0)).unwrap().item();
        assert!((two - 2.0 * one).abs() < 1e-12);
        let bad = LossWeights {
            lambda_mi: -1.0,
            ..w
        };
        assert!(matches!(total_generator_loss(&parts, &bad), Err(PaceError::Config(_))));
    }
}
