// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use pace_core::pipeline::{Config, ScheduleConfig};

/// A configuration small enough that the whole CLI chain runs in seconds.
pub fn tiny_config() -> Config {
    let mut cfg = Config::desk();
    cfg.data.timbres = 2;
    cfg.data.contours = 10;
    cfg.data.duration = 0.4;
    let sched = ScheduleConfig { steps: 2, learning_rate: 1e-3, batch_size: 1 };
    cfg.reference = sched.clone();
    cfg.stage1 = sched.clone();
    cfg.stage2 = sched.clone();
    cfg.stage3 = sched;
    cfg.club.fit_steps = 1;
    cfg.club.frames_per_utterance = 8;
    cfg.training.segment_samples = 3200;
    cfg.training.kmeans_clips = 2;
    cfg.training.probe_clips = 2;
    cfg.training.probe_step = 1;
    cfg.rvq.kmeans_iterations = 1;
    cfg
}

/// [`tiny_config`] with enough reference training that decoded audio is
/// voiced, so every report row has defined distances.
pub fn chain_config() -> Config {
    let mut cfg = tiny_config();
    cfg.reference.steps = 300;
    cfg.stage1.steps = 60;
    cfg
}

pub fn write_config(dir: &Path, cfg: &Config) -> std::path::PathBuf {
    let path = dir.join("pace.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

/// Runs `pace` with `--config` and `--out` pointing into `dir`.
pub fn pace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pace"))
        .arg("--config")
        .arg(dir.join("pace.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("PACE_CONFIG")
        .output()
        .unwrap()
}

pub fn pace_ok(dir: &Path, args: &[&str]) -> Output {
    let out = pace(dir, args);
    assert!(
        out.status.success(),
        "pace {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every training command for all four variants, then the report.
pub fn full_chain(dir: &Path, pairs: usize) {
    pace_ok(dir, &["synth"]);
    pace_ok(dir, &["train-ref"]);
    for k in ["1", "2", "3"] {
        pace_ok(dir, &["train", "--stage", k, "--variant", "full"]);
        pace_ok(dir, &["train", "--stage", k, "--variant", "no-scale"]);
    }
    pace_ok(dir, &["train", "--stage", "3", "--variant", "no-mi"]);
    pace_ok(dir, &["train", "--stage", "3", "--variant", "no-recon-e"]);
    pace_ok(dir, &["eval", "--report", "--pairs", &pairs.to_string()]);
}
