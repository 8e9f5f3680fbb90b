// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PaceError>;

#[derive(Debug, Error)]
pub enum PaceError {
    /// A tensor axis did not have the size an operation requires.
    #[error("dimension mismatch in {op}: axis {axis} expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },

    #[error("index out of range in {op}: position {position} holds {value}, bound is {bound}")]
    Index {
        op: &'static str,
        position: usize,
        value: usize,
        bound: usize,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A training stage ran without the checkpoint it builds on.
    #[error("missing prerequisite: {what} (run {needed} first)")]
    Dependency { what: String, needed: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("f0 distance undefined: {0}")]
    UndefinedDistance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PaceError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        PaceError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PaceError::Config(msg.into())
    }
}

impl From<csv::Error> for PaceError {
    fn from(err: csv::Error) -> Self {
        PaceError::Format(err.to_string())
    }
}
