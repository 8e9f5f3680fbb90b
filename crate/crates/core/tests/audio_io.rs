// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::TAU;

use pace_core::audio::{ingest, resample, write_wav};
use pace_core::codec::{AudioClip, SAMPLE_RATE};
use pace_core::prosody::extract_f0;

fn sine(freq: f64, rate: u32, secs: f64) -> Vec<f64> {
    let n = (rate as f64 * secs) as usize;
    (0..n).map(|i| 0.5 * (TAU * freq * i as f64 / rate as f64).sin()).collect()
}

fn median_voiced(clip: &AudioClip) -> (f64, usize) {
    let (f0, uv) = extract_f0(clip).unwrap();
    let mut v: Vec<f64> = f0.into_iter().zip(uv).filter(|(_, u)| *u == 1).map(|(f, _)| f).collect();
    v.sort_by(f64::total_cmp);
    (v[v.len() / 2], v.len())
}

#[test]
fn resampled_kilohertz_sine_keeps_its_pitch() {
    let y = resample(&sine(1000.0, 48_000, 1.0), 48_000, SAMPLE_RATE).unwrap();
    let (f, voiced) = median_voiced(&AudioClip::new(y, SAMPLE_RATE));
    assert!(voiced > 500, "{voiced}");
    assert!((f - 1000.0).abs() / 1000.0 < 1e-3, "{f}");
}

#[test]
fn upsampled_tone_keeps_its_pitch() {
    let y = resample(&sine(330.0, 16_000, 1.0), 16_000, SAMPLE_RATE).unwrap();
    let (f, _) = median_voiced(&AudioClip::new(y, SAMPLE_RATE));
    assert!((f - 330.0).abs() / 330.0 < 1e-3, "{f}");
}

#[test]
fn ingest_crops_long_clips_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("long.wav");
    let ramp: Vec<f64> = (0..SAMPLE_RATE as usize * 5).map(|i| 0.5 * (i as f64 / 120_000.0) - 0.25).collect();
    write_wav(&path, &AudioClip::new(ramp, SAMPLE_RATE)).unwrap();
    let a = ingest(&path, 1).unwrap();
    let b = ingest(&path, 2).unwrap();
    assert_eq!(a.clip.len(), 48_000);
    assert_eq!(a.original_rate, SAMPLE_RATE);
    assert_ne!(a.crop_offset, b.crop_offset);
    assert!(a.crop_offset + 48_000 <= 120_000);
}
