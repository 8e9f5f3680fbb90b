// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Additive-harmonic synthetic speech stand-in: a timbre is a fixed set of
//! harmonic amplitudes, prosody is a piecewise-linear f0 contour.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::DataConfig;
use crate::codec::{AudioClip, CODEC_HOP, FRAME_HOP, SAMPLE_RATE};
use crate::error::{PaceError, Result};

pub const HARMONICS: usize = 8;
pub const F0_RANGE_HZ: (f64, f64) = (50.0, 1000.0);
/// Peak bound of the harmonic part after amplitude normalization.
pub const PEAK: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// `(time in s, f0 in Hz)` control points, sorted by time.
    pub f0_contour: Vec<(f64, f64)>,
    pub harmonic_amplitudes: [f64; HARMONICS],
    pub duration: f64,
    pub noise_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub clip: AudioClip,
    /// Ground-truth f0 at each 40-sample frame centre.
    pub f0_hz: Vec<f64>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.f0_contour.is_empty() {
            return Err(PaceError::config("f0 contour needs at least one control point"));
        }
        for w in self.f0_contour.windows(2) {
            if !(w[1].0 >= w[0].0) {
                return Err(PaceError::config("f0 contour times must be non-decreasing"));
            }
        }
        for &(t, f) in &self.f0_contour {
            if !t.is_finite() || !(F0_RANGE_HZ.0..=F0_RANGE_HZ.1).contains(&f) {
                return Err(PaceError::config(format!(
                    "f0 control point ({t}, {f}) outside [{}, {}] Hz",
                    F0_RANGE_HZ.0, F0_RANGE_HZ.1
                )));
            }
        }
        if self.harmonic_amplitudes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(PaceError::config("harmonic amplitudes must be finite and nonnegative"));
        }
        if !(self.noise_floor.is_finite() && self.noise_floor >= 0.0) {
            return Err(PaceError::config("noise floor must be finite and nonnegative"));
        }
        if self.samples() == 0 {
            return Err(PaceError::config(format!(
                "duration {} s is shorter than one {CODEC_HOP}-sample frame",
                self.duration
            )));
        }
        Ok(())
    }

    /// Sample count: the duration rounded down to a multiple of 320.
    pub fn samples(&self) -> usize {
        if !(self.duration > 0.0) {
            return 0;
        }
        let n = (self.duration * SAMPLE_RATE as f64).round() as usize;
        n / CODEC_HOP * CODEC_HOP
    }

    /// Piecewise-linear f0 at time `t`, held constant outside the control points.
    pub fn f0_at(&self, t: f64) -> f64 {
        let c = &self.f0_contour;
        if t <= c[0].0 {
            return c[0].1;
        }
        for w in c.windows(2) {
            if t <= w[1].0 {
                let span = w[1].0 - w[0].0;
                if span <= 0.0 {
                    return w[1].1;
                }
                return w[0].1 + (w[1].1 - w[0].1) * (t - w[0].0) / span;
            }
        }
        c[c.len() - 1].1
    }

    fn synthesize(&self, rng: &mut impl Rng) -> SyntheticClip {
        let n = self.samples();
        let sr = SAMPLE_RATE as f64;
        let total: f64 = self.harmonic_amplitudes.iter().sum();
        let gain = if total > 0.0 { PEAK / total } else { 0.0 };
        let noise = Normal::new(0.0, self.noise_floor.max(f64::MIN_POSITIVE)).expect("valid normal");
        let mut phase = 0.0_f64;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let f = self.f0_at(i as f64 / sr);
            let mut s = 0.0;
            for (h, a) in self.harmonic_amplitudes.iter().enumerate() {
                let fh = f * (h + 1) as f64;
                if *a > 0.0 && fh < sr / 2.0 {
                    s += a * ((h + 1) as f64 * phase).sin();
                }
            }
            s *= gain;
            if self.noise_floor > 0.0 {
                s += noise.sample(rng);
            }
            samples.push(s);
            phase = (phase + TAU * f / sr) % TAU;
        }
        let f0_hz = (0..n / FRAME_HOP)
            .map(|t| self.f0_at((t * FRAME_HOP + FRAME_HOP / 2) as f64 / sr))
            .collect();
        SyntheticClip {
            clip: AudioClip::new(samples, SAMPLE_RATE),
            f0_hz,
        }
    }
}

/// Renders every spec. Clip `i` draws its noise from stream `i` of a
/// ChaCha8 generator seeded with `seed`, so output is deterministic.
pub fn generate_synthetic_dataset(specs: &[SyntheticSpec], seed: u64) -> Result<Vec<SyntheticClip>> {
    for s in specs {
        s.validate()?;
    }
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            s.synthesize(&mut rng)
        })
        .collect())
}

/// Harmonic amplitudes and base pitch of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Timbre {
    pub amplitudes: [f64; HARMONICS],
    pub base_hz: f64,
}

/// The `k`-th of a fixed family of timbres: spectral tilt, one emphasized
/// formant-like harmonic and a base pitch spread over 110–260 Hz.
pub fn timbre(k: usize, count: usize) -> Timbre {
    let tilt = 0.35 + 0.5 * ((k * 5) % count.max(1)) as f64 / count.max(1) as f64;
    let peak = 1 + (k * 3) % (HARMONICS - 1);
    let mut amplitudes = [0.0; HARMONICS];
    for (h, a) in amplitudes.iter_mut().enumerate() {
        let boost = if h == peak { 1.5 } else if h + 1 == peak || h == peak + 1 { 1.15 } else { 1.0 };
        *a = boost * (-(h as f64) * tilt).exp();
    }
    let base_hz = 110.0 * (260.0_f64 / 110.0).powf(k as f64 / count.max(2).saturating_sub(1) as f64);
    Timbre { amplitudes, base_hz }
}

/// Pitch-ratio curve of contour shape `c` at normalized time `u ∈ [0, 1]`:
/// a partial sinusoid whose cycle count and phase depend on `c`. No shape
/// is flat and the first 20 are pairwise distinct.
pub fn contour_ratio(c: usize, u: f64) -> f64 {
    let cycles = [0.5, 0.75, 1.0, 1.5, 2.0][c % 5];
    let phase = TAU / 4.0 * ((c / 5) % 4) as f64;
    let depth = 0.2 + 0.03 * (c % 3) as f64;
    (depth * (TAU * cycles * u + phase).sin()).exp()
}

/// One item of the standard corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub timbre: usize,
    pub contour: usize,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPlan {
    pub train: Vec<CorpusItem>,
    pub test: Vec<CorpusItem>,
}

/// Every (timbre, contour) combination, with combinations where
/// `(3·timbre + contour) % test_stride == 0` held out.
pub fn standard_corpus(cfg: &DataConfig) -> CorpusPlan {
    let mut plan = CorpusPlan {
        train: Vec::new(),
        test: Vec::new(),
    };
    let points = 16;
    for t in 0..cfg.timbres {
        let tb = timbre(t, cfg.timbres);
        for c in 0..cfg.contours {
            let f0_contour = (0..=points)
                .map(|i| {
                    let u = i as f64 / points as f64;
                    let f = (tb.base_hz * contour_ratio(c, u)).clamp(F0_RANGE_HZ.0, F0_RANGE_HZ.1);
                    (u * cfg.duration, f)
                })
                .collect();
            let item = CorpusItem {
                timbre: t,
                contour: c,
                spec: SyntheticSpec {
                    f0_contour,
                    harmonic_amplitudes: tb.amplitudes,
                    duration: cfg.duration,
                    noise_floor: cfg.noise_floor,
                },
            };
            if (3 * t + c) % cfg.test_stride == 0 {
                plan.test.push(item);
            } else {
                plan.train.push(item);
            }
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prosody::extract_f0;

    fn flat(f: f64, noise: f64, amps: [f64; HARMONICS]) -> SyntheticSpec {
        SyntheticSpec {
            f0_contour: vec![(0.0, f)],
            harmonic_amplitudes: amps,
            duration: 1.0,
            noise_floor: noise,
        }
    }

    #[test]
    fn tracker_recovers_constant_pitch() {
        let spec = flat(220.0, 0.002, [1.0, 0.5, 0.3, 0.2, 0.1, 0.1, 0.05, 0.05]);
        let clip = &generate_synthetic_dataset(&[spec], 3).unwrap()[0];
        assert_eq!(clip.clip.len(), 24_000);
        assert!(clip.clip.peak() <= PEAK + 0.02);
        let (f0, _) = extract_f0(&clip.clip).unwrap();
        let close = f0.iter().filter(|f| (*f - 220.0).abs() <= 2.0).count();
        assert!(close as f64 > 0.95 * f0.len() as f64, "{close}/{}", f0.len());
    }

    #[test]
    fn silence_and_determinism() {
        let spec = flat(220.0, 0.0, [0.0; HARMONICS]);
        let clip = &generate_synthetic_dataset(&[spec], 1).unwrap()[0];
        assert!(clip.clip.samples().iter().all(|&s| s == 0.0));
        let (_, uv) = extract_f0(&clip.clip).unwrap();
        assert!(uv.iter().all(|&u| u == 0));

        let noisy = flat(150.0, 0.01, [1.0; HARMONICS]);
        let a = generate_synthetic_dataset(&[noisy.clone()], 7).unwrap();
        let b = generate_synthetic_dataset(&[noisy], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_contour_rejected() {
        let mut spec = flat(220.0, 0.0, [1.0; HARMONICS]);
        spec.f0_contour.push((0.5, 1200.0));
        assert!(matches!(generate_synthetic_dataset(&[spec], 0), Err(PaceError::Config(_))));
    }

    #[test]
    fn corpus_split_and_shapes() {
        let plan = standard_corpus(&DataConfig::default());
        assert_eq!(plan.train.len() + plan.test.len(), 240);
        assert_eq!(plan.test.len(), 48);
        for c in 0..20 {
            let r: Vec<f64> = (0..=20).map(|i| contour_ratio(c, i as f64 / 20.0)).collect();
            let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread > 0.1, "contour {c} is nearly flat");
        }
        for item in plan.test.iter().chain(&plan.train) {
            item.spec.validate().unwrap();
        }
    }
}
