// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Frame-level pitch and voicing, their 256-level quantization, and the
//! embedding tables that turn them into additive prosody embeddings.
//!
//! The tracker is a YIN-style estimator: for each 40-sample hop it takes a
//! 1024-sample window centred on the hop (moved inward at the clip edges), computes the squared difference
//! function via FFT cross-correlation, normalizes it by its cumulative mean,
//! and reports the first dip under the voicing threshold, refined by a
//! parabola through the neighbouring lags.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::codec::{AudioClip, FRAME_HOP, SAMPLE_RATE};
use crate::error::{PaceError, Result};
use crate::tensor::{LayerParams, Tensor};

pub const F0_VOCAB: usize = 256;
pub const UV_VOCAB: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct PitchTracker {
    pub window: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Upper bound on the cumulative-mean-normalized difference for a voiced frame.
    pub threshold: f64,
    /// Frames whose mean power falls below this are unvoiced without analysis.
    pub power_floor: f64,
}

impl Default for PitchTracker {
    fn default() -> Self {
        Self {
            window: 1024,
            f0_min_hz: 50.0,
            f0_max_hz: 1000.0,
            threshold: 0.2,
            power_floor: 1e-8,
        }
    }
}

struct Plans {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl PitchTracker {
    fn lag_range(&self, sample_rate: f64) -> (usize, usize) {
        let min_lag = (sample_rate / self.f0_max_hz).floor().max(2.0) as usize;
        let max_lag = (sample_rate / self.f0_min_hz).ceil() as usize;
        (min_lag, max_lag)
    }

    /// Per-hop f0 in Hz (0 when unvoiced) and voicing flags for a 24 kHz clip.
    pub fn track(&self, clip: &AudioClip) -> Result<(Vec<f64>, Vec<u8>)> {
        if clip.sample_rate() != SAMPLE_RATE {
            return Err(PaceError::config(format!(
                "pitch tracking runs at {SAMPLE_RATE} Hz, clip is {} Hz",
                clip.sample_rate()
            )));
        }
        if clip.is_empty() {
            return Err(PaceError::contract("cannot track pitch of an empty clip"));
        }
        let sr = SAMPLE_RATE as f64;
        let (min_lag, max_lag) = self.lag_range(sr);
        if max_lag + 2 >= self.window {
            return Err(PaceError::config(format!(
                "window of {} samples cannot hold lags up to {max_lag}",
                self.window
            )));
        }
        let integration = self.window - max_lag - 1;
        let size = (self.window + integration).next_power_of_two();
        let mut planner = FftPlanner::new();
        let plans = Plans {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        };

        let samples = clip.samples();
        let frames = samples.len() / FRAME_HOP;
        let half = self.window / 2;
        let mut f0 = vec![0.0; frames];
        let mut uv = vec![0u8; frames];
        let mut buf = vec![0.0; self.window];
        for t in 0..frames {
            let center = t * FRAME_HOP + FRAME_HOP / 2;
            // Windows are slid inward at the clip edges; only clips shorter
            // than one window are zero-padded.
            let start = center.saturating_sub(half).min(samples.len().saturating_sub(self.window));
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = samples.get(start + j).copied().unwrap_or(0.0);
            }
            if let Some(lag) = self.frame_period(&buf, integration, min_lag, max_lag, &plans) {
                // Refinement can move a period at the edge of the lag range
                // past it by up to half a sample.
                f0[t] = (sr / lag).clamp(self.f0_min_hz, self.f0_max_hz);
                uv[t] = 1;
            }
        }
        Ok((f0, uv))
    }

    /// Refined period in samples, or `None` for an unvoiced frame.
    fn frame_period(
        &self,
        x: &[f64],
        integration: usize,
        min_lag: usize,
        max_lag: usize,
        plans: &Plans,
    ) -> Option<f64> {
        let energy0: f64 = x[..integration].iter().map(|v| v * v).sum();
        if energy0 / (integration as f64) < self.power_floor {
            return None;
        }

        // r(τ) = Σ_{j<W} x_j x_{j+τ}, via conj(FFT(head)) · FFT(x).
        let mut head: Vec<Complex<f64>> = vec![Complex::default(); plans.size];
        let mut full: Vec<Complex<f64>> = vec![Complex::default(); plans.size];
        for (j, &v) in x.iter().enumerate() {
            full[j].re = v;
            if j < integration {
                head[j].re = v;
            }
        }
        plans.forward.process(&mut head);
        plans.forward.process(&mut full);
        for (h, f) in head.iter_mut().zip(&full) {
            *h = h.conj() * f;
        }
        plans.inverse.process(&mut head);
        let scale = 1.0 / plans.size as f64;

        let mut prefix = vec![0.0; x.len() + 1];
        for (i, &v) in x.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v * v;
        }

        // Cumulative-mean-normalized difference, d'(τ) for τ in 1..=max_lag.
        let mut cmnd = vec![1.0; max_lag + 2];
        let mut running = 0.0;
        for tau in 1..=max_lag + 1 {
            let shifted = prefix[tau + integration] - prefix[tau];
            let d = (energy0 + shifted - 2.0 * head[tau].re * scale).max(0.0);
            running += d;
            cmnd[tau] = if running > 0.0 { d * tau as f64 / running } else { 1.0 };
        }

        let mut tau = min_lag;
        while tau <= max_lag {
            if cmnd[tau] < self.threshold {
                while tau < max_lag && cmnd[tau + 1] < cmnd[tau] {
                    tau += 1;
                }
                let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
                let denom = a - 2.0 * b + c;
                let shift = if denom.abs() > 1e-12 {
                    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                };
                return Some(tau as f64 + shift);
            }
            tau += 1;
        }
        None
    }
}

/// Per-frame pitch features at the 40-sample hop.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyFeatures {
    pub f0_bins: Vec<usize>,
    pub uv: Vec<u8>,
    pub raw_f0_hz: Vec<f64>,
}

/// Tracks f0 with the default tracker.
pub fn extract_f0(clip: &AudioClip) -> Result<(Vec<f64>, Vec<u8>)> {
    PitchTracker::default().track(clip)
}

/// Min–max normalizes voiced f0 over the utterance and maps it to `0..=255`.
///
/// Unvoiced frames map to bin 0; so do all voiced frames when the voiced range
/// is zero. An utterance with no voiced frame yields all zeros.
pub fn quantize_f0(raw_f0_hz: &[f64], uv: &[u8]) -> Result<Vec<usize>> {
    if raw_f0_hz.len() != uv.len() {
        return Err(PaceError::Dimension {
            op: "quantize_f0",
            axis: 0,
            expected: raw_f0_hz.len(),
            found: uv.len(),
        });
    }
    let voiced = || raw_f0_hz.iter().zip(uv).filter(|(_, &u)| u == 1).map(|(&f, _)| f);
    let lo = voiced().fold(f64::INFINITY, f64::min);
    let hi = voiced().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(raw_f0_hz
        .iter()
        .zip(uv)
        .map(|(&f, &u)| {
            if u == 0 || !(range > 0.0) {
                0
            } else {
                let norm = (f - lo) / range;
                ((norm * F0_VOCAB as f64).floor() as usize).min(F0_VOCAB - 1)
            }
        })
        .collect())
}

impl ProsodyFeatures {
    pub fn extract(clip: &AudioClip) -> Result<Self> {
        Self::extract_with(&PitchTracker::default(), clip)
    }

    pub fn extract_with(tracker: &PitchTracker, clip: &AudioClip) -> Result<Self> {
        let (raw_f0_hz, uv) = tracker.track(clip)?;
        Self::from_raw(raw_f0_hz, uv)
    }

    pub fn from_raw(raw_f0_hz: Vec<f64>, uv: Vec<u8>) -> Result<Self> {
        let f0_bins = quantize_f0(&raw_f0_hz, &uv)?;
        let raw_f0_hz = raw_f0_hz
            .iter()
            .zip(&uv)
            .map(|(&f, &u)| if u == 1 { f } else { 0.0 })
            .collect();
        Ok(Self {
            f0_bins,
            uv,
            raw_f0_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.uv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uv.is_empty()
    }

    /// Trims, or pads with unvoiced frames, to exactly `frames` entries.
    pub fn fit_to(&self, frames: usize) -> Self {
        let mut out = self.clone();
        out.f0_bins.resize(frames, 0);
        out.uv.resize(frames, 0);
        out.raw_f0_hz.resize(frames, 0.0);
        out
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.uv.is_empty() {
            return 0.0;
        }
        self.uv.iter().filter(|&&u| u == 1).count() as f64 / self.uv.len() as f64
    }

    /// Writes `frame_index,raw_f0_hz,f0_bin,uv` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frame_index", "raw_f0_hz", "f0_bin", "uv"])?;
        for i in 0..self.len() {
            w.write_record([
                i.to_string(),
                format!("{:.4}", self.raw_f0_hz[i]),
                self.f0_bins[i].to_string(),
                self.uv[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Prosody embeddings for one utterance, each `frames × dim`.
#[derive(Clone, Debug)]
pub struct ProsodyEmbeddings {
    pub e_f0: Tensor,
    pub e_uv: Tensor,
}

impl ProsodyEmbeddings {
    pub fn frames(&self) -> usize {
        self.e_f0.dim(0)
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            e_f0: Tensor::zeros(&[frames, dim]),
            e_uv: Tensor::zeros(&[frames, dim]),
        }
    }
}

/// Lookup tables for f0 bins (vocabulary 256) and voicing (vocabulary 2).
#[derive(Clone, Debug)]
pub struct ProsodyEmbedder {
    pub f0_table: LayerParams,
    pub uv_table: LayerParams,
}

impl ProsodyEmbedder {
    pub const INIT_STD: f64 = 0.1;

    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            f0_table: LayerParams::embedding(F0_VOCAB, dim, Self::INIT_STD, rng),
            uv_table: LayerParams::embedding(UV_VOCAB, dim, Self::INIT_STD, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.f0_table.channels_out
    }

    pub fn embed(&self, features: &ProsodyFeatures) -> Result<ProsodyEmbeddings> {
        let uv: Vec<usize> = features.uv.iter().map(|&u| u as usize).collect();
        Ok(ProsodyEmbeddings {
            e_f0: self.f0_table.lookup(&features.f0_bins)?,
            e_uv: self.uv_table.lookup(&uv)?,
        })
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = self.f0_table.named_parameters("prosody.f0_table");
        v.extend(self.uv_table.named_parameters("prosody.uv_table"));
        v
    }

    pub fn set_trainable(&self, flag: bool) {
        self.f0_table.set_trainable(flag);
        self.uv_table.set_trainable(flag);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn sine(hz: f64, seconds: f64, amp: f64) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (TAU * hz * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        AudioClip::new(samples, SAMPLE_RATE)
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn sine_220_is_tracked() {
        let (f0, uv) = extract_f0(&sine(220.0, 2.0, 0.5)).unwrap();
        assert_eq!(f0.len(), 1200);
        assert!(uv.iter().all(|&u| u == 1));
        let m = median(f0);
        assert!((m - 220.0).abs() <= 2.0, "median {m}");
    }

    #[test]
    fn silence_is_unvoiced() {
        let clip = AudioClip::new(vec![0.0; 48000], SAMPLE_RATE);
        let (f0, uv) = extract_f0(&clip).unwrap();
        assert_eq!(f0.len(), 1200);
        assert!(uv.iter().all(|&u| u == 0));
        assert!(f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn wrong_rate_and_empty_clip_are_rejected() {
        let clip = AudioClip::new(vec![0.0; 16000], 16000);
        assert!(matches!(extract_f0(&clip), Err(PaceError::Config(_))));
        let empty = AudioClip::new(vec![], SAMPLE_RATE);
        assert!(matches!(extract_f0(&empty), Err(PaceError::Contract(_))));
    }

    #[test]
    fn quantization_endpoints_and_midpoint() {
        let bins = quantize_f0(&[100.0, 300.0, 200.0, 0.0], &[1, 1, 1, 0]).unwrap();
        assert_eq!(bins, vec![0, 255, 128, 0]);
    }

    #[test]
    fn constant_pitch_maps_to_bin_zero() {
        let bins = quantize_f0(&[180.0, 180.0, 180.0], &[1, 1, 1]).unwrap();
        assert_eq!(bins, vec![0, 0, 0]);
        let none = quantize_f0(&[0.0, 0.0], &[0, 0]).unwrap();
        assert_eq!(none, vec![0, 0]);
    }

    #[test]
    fn embeddings_have_table_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let embedder = ProsodyEmbedder::new(256, &mut rng);
        let feats = ProsodyFeatures::from_raw(vec![150.0; 1200], vec![1; 1200]).unwrap();
        let e = embedder.embed(&feats).unwrap();
        assert_eq!(e.e_f0.shape(), &[1200, 256]);
        assert_eq!(e.e_uv.shape(), &[1200, 256]);
        let v = e.e_f0.values();
        assert!(v.chunks(256).all(|row| row == &v[..256]));
    }

    #[test]
    fn csv_export_has_one_row_per_frame() {
        let feats = ProsodyFeatures::from_raw(vec![100.0, 0.0, 300.0], vec![1, 0, 1]).unwrap();
        let mut out = Vec::new();
        feats.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame_index,raw_f0_hz,f0_bin,uv");
        assert_eq!(lines[2], "1,0.0000,0,0");
        assert_eq!(lines.len(), 4);
    }
}
