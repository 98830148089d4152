use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum NcvError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {bound} in {context}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("generation failed for class {class}: {reason}")]
    Generation { class: usize, reason: String },
    #[error("malformed encoding file{}: {msg}", record.map(|r| format!(" at record {r}")).unwrap_or_default())]
    Format { record: Option<u64>, msg: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}, phase {phase}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        phase: &'static str,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("spec hash mismatch: checkpoint {checkpoint:016x}, config {config:016x}")]
    HashMismatch { checkpoint: u64, config: u64 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NcvError {
    pub fn contract(msg: impl Into<String>) -> Self {
        NcvError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        NcvError::Config(msg.into())
    }

    pub fn format(record: Option<u64>, msg: impl Into<String>) -> Self {
        NcvError::Format {
            record,
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 runtime, 3 contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            NcvError::Config(_) | NcvError::Json(_) => 1,
            NcvError::NonFinite { .. } | NcvError::Io(_) | NcvError::Format { .. } => 2,
            NcvError::Generation { .. } => 2,
            NcvError::Dimension { .. }
            | NcvError::Index { .. }
            | NcvError::Contract(_)
            | NcvError::HashMismatch { .. } => 3,
        }
    }
}

pub type Result<T, E = NcvError> = std::result::Result<T, E>;
