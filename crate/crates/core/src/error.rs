use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("provenance mismatch: expected {expected}, got {got}")]
    Provenance { expected: String, got: String },

    #[error("probability {value} outside (0, 1) for {what}")]
    Probability { what: &'static str, value: f64 },

    #[error("poisson solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("training diverged at step {step}: {diagnostics}")]
    Divergence { step: usize, diagnostics: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("backbone spec mismatch in field `{field}`: checkpoint has {found}, expected {expected}")]
    SpecMismatch {
        field: &'static str,
        found: String,
        expected: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("{count} of {total} scenes failed to repaint; first: {first}")]
    Batch {
        count: usize,
        total: usize,
        first: Box<Error>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
