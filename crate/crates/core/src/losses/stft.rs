// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{PaceError, Result};
use crate::tensor::Tensor;

/// Added under the square root so the magnitude is differentiable at zero.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Geometry of a centred short-time transform: the signal is zero-padded
/// by `n_fft / 2` on both sides and framed every `hop` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftGeometry {
    pub n_fft: usize,
    pub hop: usize,
}

impl StftGeometry {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < 2 || n_fft % 2 != 0 || hop == 0 {
            return Err(PaceError::contract(format!(
                "stft needs an even n_fft ≥ 2 and a positive hop, got {n_fft}/{hop}"
            )));
        }
        Ok(Self { n_fft, hop })
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

struct Plan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Magnitude spectrogram `frames × bins` of a waveform tensor (`1 × L` or `L`),
/// differentiable with respect to the waveform.
pub fn stft_magnitude(x: &Tensor, geometry: StftGeometry) -> Result<Tensor> {
    let len = x.numel();
    if len == 0 {
        return Err(PaceError::contract("stft of an empty signal"));
    }
    let StftGeometry { n_fft, hop } = geometry;
    let frames = geometry.frames(len);
    let bins = geometry.bins();
    let half = n_fft / 2;
    let window = hann(n_fft);
    let mut planner = FftPlanner::new();
    let plan = Plan {
        forward: planner.plan_fft_forward(n_fft),
        inverse: planner.plan_fft_inverse(n_fft),
    };

    let signal = x.to_vec();
    let mut spectra = vec![Complex::<f64>::default(); frames * bins];
    let mut buf = vec![Complex::<f64>::default(); n_fft];
    for t in 0..frames {
        for (n, slot) in buf.iter_mut().enumerate() {
            let v = (t * hop + n)
                .checked_sub(half)
                .and_then(|i| signal.get(i))
                .copied()
                .unwrap_or(0.0);
            *slot = Complex::new(v * window[n], 0.0);
        }
        plan.forward.process(&mut buf);
        spectra[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
    }
    let mags: Vec<f64> = spectra.iter().map(|c| (c.norm_sqr() + MAGNITUDE_FLOOR).sqrt()).collect();

    Ok(Tensor::from_op(mags, &[frames, bins], vec![x.clone()], move |_, out, g| {
        let mut gx = vec![0.0; len];
        let mut buf = vec![Complex::<f64>::default(); n_fft];
        for t in 0..frames {
            buf.fill(Complex::default());
            for k in 0..bins {
                let idx = t * bins + k;
                let s = g[idx] / out[idx];
                buf[k] = spectra[idx] * s;
            }
            // ∂L/∂x_n = w_n · Re(Σ_k G_k e^{+2πikn/N}), G_k = ∂L/∂Re_k + i·∂L/∂Im_k.
            plan.inverse.process(&mut buf);
            for (n, b) in buf.iter().enumerate() {
                if let Some(i) = (t * hop + n).checked_sub(half).filter(|&i| i < len) {
                    gx[i] += window[n] * b.re;
                }
            }
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    #[test]
    fn sine_peaks_at_its_bin() {
        let n = 256;
        let x: Vec<f64> = (0..1024).map(|i| (2.0 * PI * 16.0 * i as f64 / n as f64).sin()).collect();
        let t = Tensor::new(x, &[1, 1024]).unwrap();
        let m = stft_magnitude(&t, StftGeometry::new(n, 64).unwrap()).unwrap();
        let bins = n / 2 + 1;
        let row = &m.values()[8 * bins..9 * bins];
        let peak = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, 16);
        assert!((row[16] - n as f64 / 4.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::param((0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect(), &[1, 40]).unwrap();
        let w: Vec<f64> = (0..11 * 9).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
        let err = gradcheck::max_rel_error(&[x.clone()], 1e-5, || {
            let m = stft_magnitude(&x, StftGeometry::new(16, 4).unwrap())?;
            let wt = Tensor::new(w.clone(), m.shape())?;
            Ok(m.mul(&wt)?.sum())
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
