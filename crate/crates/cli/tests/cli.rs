// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

mod common;

use std::fs;

use common::{chain_config, full_chain, pace, pace_ok, tiny_config, write_config};
use pace_core::audio::{read_wav, write_wav};
use pace_core::codec::{read_codes, AudioClip, SAMPLE_RATE};
use pace_core::losses::spectral_distance;
use pace_core::pipeline::{generate_synthetic_dataset, Checkpoint, PaceState, SyntheticSpec};
use pace_core::prosody::ProsodyFeatures;
use pace_core::tensor::no_grad;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &tiny_config());
    dir
}

fn tone(f0: f64, secs: f64) -> SyntheticSpec {
    SyntheticSpec {
        f0_contour: vec![(0.0, f0), (secs, f0 * 1.5)],
        harmonic_amplitudes: [1.0, 0.5, 0.3, 0.2, 0.1, 0.1, 0.05, 0.05],
        duration: secs,
        noise_floor: 0.0,
    }
}

fn write_tone(path: &std::path::Path, f0: f64, secs: f64) -> AudioClip {
    let clip = generate_synthetic_dataset(&[tone(f0, secs)], 3).unwrap().remove(0).clip;
    write_wav(path, &clip).unwrap();
    clip
}

#[test]
fn stage_two_without_stage_one_exits_with_dependency_code() {
    let dir = setup();
    pace_ok(dir.path(), &["train-ref"]);
    let out = pace(dir.path(), &["train", "--stage", "2"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage 1"), "{err}");
}

#[test]
fn training_without_reference_names_train_ref() {
    let dir = setup();
    let out = pace(dir.path(), &["train", "--stage", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-ref"));
}

#[test]
fn bad_arguments_exit_with_usage() {
    let dir = setup();
    let out = pace(dir.path(), &["train", "--stage", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pace train --stage"));
    let out = pace(dir.path(), &["train", "--stage", "2", "--variant", "no-mi"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_corpus_and_manifest() {
    let dir = setup();
    pace_ok(dir.path(), &["synth"]);
    let data = dir.path().join("out/data");
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let lines: Vec<_> = manifest.lines().collect();
    assert_eq!(lines[0], "file,split,timbre,contour");
    assert_eq!(lines.len(), 1 + 20);
    let first = lines[1].split(',').next().unwrap();
    let (samples, rate) = read_wav(&data.join(first)).unwrap();
    assert_eq!(rate, SAMPLE_RATE);
    assert_eq!(samples.len(), 9600);
    assert!(data.join(first.replace(".wav", ".f0.csv")).exists());
}

#[test]
fn infer_and_codes_round_trip() {
    let dir = setup();
    let d = dir.path();
    pace_ok(d, &["train-ref"]);
    for k in ["1", "2", "3"] {
        pace_ok(d, &["train", "--stage", k]);
    }
    assert!(d.join("out/checkpoints/full/stage3.pack").exists());
    assert!(d.join("out/logs/full-stage3.csv").exists());

    // Prompts at other rates and lengths are resampled and cropped to 2 s.
    let target = d.join("target.wav");
    let prompt = d.join("prompt.wav");
    write_tone(&target, 150.0, 2.0);
    let mut long = generate_synthetic_dataset(&[tone(220.0, 3.0)], 4).unwrap().remove(0).clip;
    long = AudioClip::new(pace_core::audio::resample(long.samples(), SAMPLE_RATE, 16_000).unwrap(), 16_000);
    write_wav(&prompt, &long).unwrap();
    let converted = d.join("converted.wav");
    pace_ok(
        d,
        &[
            "infer",
            "--target",
            target.to_str().unwrap(),
            "--prosody",
            prompt.to_str().unwrap(),
            "--output",
            converted.to_str().unwrap(),
        ],
    );
    let (samples, rate) = read_wav(&converted).unwrap();
    assert_eq!((samples.len(), rate), (48_000, SAMPLE_RATE));

    let codes = d.join("target.codes");
    let decoded = d.join("decoded.wav");
    pace_ok(d, &["codes", "encode", target.to_str().unwrap(), "--output", codes.to_str().unwrap()]);
    let parsed = read_codes(fs::File::open(&codes).unwrap()).unwrap();
    assert_eq!(parsed.codes.len(), 48_000 / 320);
    assert!(parsed.codes.iter().all(|f| f.len() == 8));
    pace_ok(d, &["codes", "decode", codes.to_str().unwrap(), "--output", decoded.to_str().unwrap()]);
    // The CLI round trip matches an in-process encode and decode.
    let state = PaceState::from_checkpoint(
        &Checkpoint::load(&d.join("out/checkpoints/full/stage3.pack")).unwrap(),
        &tiny_config(),
    )
    .unwrap();
    let clip = AudioClip::new(read_wav(&target).unwrap().0, SAMPLE_RATE);
    let features = ProsodyFeatures::extract(&clip).unwrap();
    let direct = no_grad(|| state.codec.decode_codes(&state.codec.encode_codes(&clip, &features)?)).unwrap();
    let direct_path = d.join("direct.wav");
    write_wav(&direct_path, &direct).unwrap();
    let a = AudioClip::new(read_wav(&decoded).unwrap().0, SAMPLE_RATE);
    let b = AudioClip::new(read_wav(&direct_path).unwrap().0, SAMPLE_RATE);
    assert_eq!(a.samples(), b.samples());
    assert_eq!(spectral_distance(&a, &b).unwrap(), 0.0);
}

#[test]
fn concurrent_runs_on_one_directory_are_refused() {
    let dir = setup();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".pace.lock"), b"").unwrap();
    let out = pace(dir.path(), &["train-ref"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"));
}

#[test]
fn full_chain_writes_a_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &chain_config());
    full_chain(dir.path(), 4);
    let mut reader = csv::Reader::from_path(dir.path().join("out/report.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["model_variant", "prosody_source", "mean_distance", "pair_count", "published_distance", "published_note"]
    );
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        let n: usize = r[3].parse().unwrap();
        assert!((1..=4).contains(&n), "{r:?}");
        assert!(r[2].parse::<f64>().unwrap().is_finite());
    }
    assert_eq!((&rows[0][0], &rows[0][1], &rows[0][4]), ("full", "source", "2.8239"));
}
