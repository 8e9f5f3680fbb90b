// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! WAV input/output, sample-rate conversion and 2 s segment ingestion.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{AudioClip, SAMPLE_RATE};
use crate::error::{PaceError, Result};

/// Ingested segment length: 2 s at 24 kHz.
pub const SEGMENT_SAMPLES: usize = 48_000;
pub const INGEST_PEAK: f64 = 0.95;
/// Taps of the windowed-sinc interpolation kernel.
pub const RESAMPLER_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;

/// Reads a PCM WAV file (8/16/24/32-bit integer or 32-bit float), averaging
/// channels to mono. Returns samples in [−1, 1] and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| PaceError::Format(format!("{}: cannot read WAV: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(PaceError::Format(format!("{}: WAV declares zero channels", path.display())));
    }
    let bad = |e: hound::Error| {
        PaceError::Format(format!(
            "{}: {e} ({:?}, {} bit, {} Hz, {} ch)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample,
            spec.sample_rate,
            spec.channels
        ))
    };
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let full = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
        (format, bits) => {
            return Err(PaceError::Format(format!(
                "{}: unsupported WAV encoding {format:?} {bits}-bit",
                path.display()
            )))
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes a clip as 16-bit mono PCM at its sample rate, clipping to [−1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fail = |e: hound::Error| PaceError::Format(format!("{}: cannot write WAV: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &s in clip.samples() {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(fail)?;
    }
    w.finalize().map_err(fail)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase windowed-sinc resampler (Kaiser window, 64 taps).
pub fn resample(x: &[f64], from_hz: u32, to_hz: u32) -> Result<Vec<f64>> {
    if from_hz == 0 || to_hz == 0 {
        return Err(PaceError::config("sample rates must be positive"));
    }
    if from_hz == to_hz {
        return Ok(x.to_vec());
    }
    let g = gcd(from_hz as u64, to_hz as u64);
    let (up, down) = ((to_hz as u64 / g) as usize, (from_hz as u64 / g) as usize);
    let cutoff = ROLLOFF * (to_hz as f64 / from_hz as f64).min(1.0);
    let half = (RESAMPLER_TAPS / 2) as isize;
    // One kernel per fractional phase p/up of the input grid.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..RESAMPLER_TAPS as isize)
                .map(|j| {
                    let t = (j - half + 1) as f64 - frac;
                    let r = t / half as f64;
                    let window = if r.abs() <= 1.0 {
                        bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
                    } else {
                        0.0
                    };
                    let arg = std::f64::consts::PI * cutoff * t;
                    let sinc = if t == 0.0 { 1.0 } else { arg.sin() / arg };
                    cutoff * sinc * window
                })
                .collect()
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    Ok((0..out_len)
        .map(|n| {
            let pos = n * down;
            let (base, p) = ((pos / up) as isize, pos % up);
            let kernel = &phases[p];
            let mut acc = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                let k = base + j as isize - half + 1;
                if k >= 0 && (k as usize) < x.len() {
                    acc += w * x[k as usize];
                }
            }
            acc
        })
        .collect())
}

/// A 2 s, 24 kHz segment of a WAV file and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedClip {
    pub clip: AudioClip,
    pub source_path: PathBuf,
    pub original_rate: u32,
    /// Start of the crop in resampled samples; 0 for padded clips.
    pub crop_offset: usize,
}

/// Resamples to 24 kHz, takes a seeded random 2 s crop (or zero-pads to
/// 2 s) and scales the peak to 0.95.
pub fn ingest(path: &Path, seed: u64) -> Result<IngestedClip> {
    let (samples, rate) = read_wav(path)?;
    let mut y = resample(&samples, rate, SAMPLE_RATE)?;
    let mut crop_offset = 0;
    if y.len() > SEGMENT_SAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crop_offset = rng.random_range(0..=y.len() - SEGMENT_SAMPLES);
        y = y[crop_offset..crop_offset + SEGMENT_SAMPLES].to_vec();
    } else {
        y.resize(SEGMENT_SAMPLES, 0.0);
    }
    let peak = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = INGEST_PEAK / peak;
        y.iter_mut().for_each(|v| *v *= g);
    }
    Ok(IngestedClip {
        clip: AudioClip::new(y, SAMPLE_RATE),
        source_path: path.to_path_buf(),
        original_rate: rate,
        crop_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64) -> Vec<f64> {
        let n = (rate as f64 * secs) as usize;
        (0..n).map(|i| 0.5 * (std::f64::consts::TAU * freq * i as f64 / rate as f64).sin()).collect()
    }

    #[test]
    fn bessel_matches_known_value() {
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-15);
    }

    #[test]
    fn resampled_lengths() {
        assert_eq!(resample(&vec![0.0; 48_000], 16_000, 24_000).unwrap().len(), 72_000);
        assert_eq!(resample(&vec![0.0; 48_000], 48_000, 24_000).unwrap().len(), 24_000);
        assert_eq!(resample(&vec![0.0; 44_100], 44_100, 24_000).unwrap().len(), 24_000);
    }

    #[test]
    fn downsampling_preserves_inband_sine() {
        let y = resample(&sine(1000.0, 48_000, 0.5), 48_000, 24_000).unwrap();
        let reference = sine(1000.0, 24_000, 0.5);
        let mid = 200..y.len() - 200;
        let err = mid.clone().map(|i| (y[i] - reference[i]).abs()).fold(0.0, f64::max);
        assert!(err < 2e-3, "{err}");
    }

    #[test]
    fn wav_round_trip_and_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for s in sine(200.0, 16_000, 3.0) {
            let v = (s * 8_388_607.0) as i32;
            w.write_sample(v).unwrap();
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let (mono, rate) = read_wav(&path).unwrap();
        assert_eq!((mono.len(), rate), (48_000, 16_000));
        let a = ingest(&path, 3).unwrap();
        let b = ingest(&path, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clip.len(), SEGMENT_SAMPLES);
        assert!((a.clip.peak() - INGEST_PEAK).abs() < 1e-12);

        let short = dir.path().join("b.wav");
        write_wav(&short, &AudioClip::new(sine(300.0, 24_000, 1.0), 24_000)).unwrap();
        let s = ingest(&short, 0).unwrap();
        assert_eq!(s.clip.len(), SEGMENT_SAMPLES);
        assert!(s.clip.samples()[24_000..].iter().all(|&v| v == 0.0));

        std::fs::write(dir.path().join("c.wav"), b"not a wav").unwrap();
        assert!(matches!(ingest(&dir.path().join("c.wav"), 0), Err(PaceError::Format(_))));
    }
}
