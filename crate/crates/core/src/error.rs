// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("capacity exceeded: {0}")]
    CapacityOverflow(String),

    #[error("functional equivalence violated: {0}")]
    EquivalenceViolation(String),

    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }
}
