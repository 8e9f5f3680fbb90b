// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

pub mod audio;
pub mod codec;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod prosody;
pub mod tensor;

pub use error::{PaceError, Result};
pub use tensor::Tensor;
