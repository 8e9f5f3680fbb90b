// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Configuration, synthetic data, checkpoints, the staged training scheme
//! and prosody-swap inference.

pub mod checkpoint;
pub mod config;
pub mod synth;
pub mod train;

pub use config::{ClubConfig, Config, DataConfig, DiscriminatorConfig, ScheduleConfig, TrainingConfig, CONFIG_ENV};
pub use synth::{generate_synthetic_dataset, standard_corpus, CorpusItem, CorpusPlan, SyntheticClip, SyntheticSpec};
pub use checkpoint::{Checkpoint, LossHistory, NamedArray, RngState, StageTag, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    load_reference, parameter_hash, prerequisite, probe_mi, snr_db, train_reference, DataClip, Dataset, LossSet,
    PaceState, StageSchedule, LOG_COLUMNS, REFERENCE_LOG_COLUMNS,
};
