//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T, E = HdroError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HdroError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: u64, message: String },

    #[error("solver diverged at iteration {iteration}: {reason}; snapshot: {snapshot}")]
    Divergence {
        iteration: u64,
        reason: String,
        snapshot: String,
    },

    #[error("unsupported oracle instance: {0}")]
    UnsupportedInstance(String),

    #[error("tuning infeasible: group {group} has {size} members, need at least 5")]
    TuningInfeasible { group: usize, size: usize },

    #[error("unsupported diagnostic: {0}")]
    UnsupportedDiagnostic(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HdroError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        HdroError::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HdroError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(HdroError::Shape { context, expected, got })
    }
}
