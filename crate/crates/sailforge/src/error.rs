//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the process exit-code
/// categories used by the CLI (see [`SailError::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum SailError {
    /// Invalid configuration value; the message names the offending field.
    #[error("configuration: {0}")]
    Config(String),

    /// Out-of-range index or out-of-vocabulary token.
    #[error("domain: {0}")]
    Domain(String),

    /// Non-finite value produced during numerics (loss, gradient, logit).
    #[error("numeric: {0}")]
    Numeric(String),

    /// All candidate scores identical; best-worst selection is undefined.
    #[error("degenerate candidate set: {0}")]
    DegenerateCandidates(String),

    /// Evaluation could not produce a meaningful result.
    #[error("evaluation: {0}")]
    Eval(String),

    /// File-system failure, tagged with the path involved.
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Malformed checkpoint, dataset, or manifest file.
    #[error("format: {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl SailError {
    /// Process exit code for the CLI: 2 config/domain, 3 numeric,
    /// 4 I/O and file-format, 5 evaluation, 6 degenerate candidates.
    pub fn exit_code(&self) -> i32 {
        match self {
            SailError::Config(_) | SailError::Domain(_) => 2,
            SailError::Numeric(_) => 3,
            SailError::Io { .. } | SailError::Format { .. } => 4,
            SailError::Eval(_) => 5,
            SailError::DegenerateCandidates(_) => 6,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SailError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SailError>;
