use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("unknown sample {0:?}")]
    UnknownSample(String),

    #[error("revision conflict on {sample_id:?}: expected {expected}, store has {current}")]
    RevisionConflict {
        sample_id: String,
        expected: u64,
        current: u64,
    },

    #[error("box {index} of {sample_id:?} is invalid: {reason}")]
    InvalidBox {
        sample_id: String,
        index: usize,
        reason: String,
    },

    #[error("illegal status transition for {sample_id:?}: {from} -> {to}")]
    IllegalTransition {
        sample_id: String,
        from: crate::model::Status,
        to: crate::model::Status,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("detector plugin failed: {message}")]
    Plugin {
        message: String,
        diagnostics: String,
    },

    #[error("detector plugin does not support {0}")]
    Unsupported(&'static str),

    #[error("annotation gate timed out with {pending} key samples still pending")]
    GateTimeout { pending: usize },

    #[error("cannot resume: {0}")]
    Resume(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Errors caused by bad inputs rather than by the environment or the plugin.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DuplicateId(_)
                | Error::MissingFile(_)
                | Error::UnknownSample(_)
                | Error::RevisionConflict { .. }
                | Error::InvalidBox { .. }
                | Error::IllegalTransition { .. }
                | Error::Invalid(_)
                | Error::DimensionMismatch(_)
                | Error::UnknownClass(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Resume(_)
        )
    }

    pub fn is_plugin(&self) -> bool {
        matches!(self, Error::Plugin { .. } | Error::Unsupported(_))
    }
}
