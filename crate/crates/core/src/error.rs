use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("caption is empty after tokenization")]
    EmptyCaption,

    #[error("corpus size {size} is below the minimum of {min}")]
    SpecTooSmall { size: usize, min: usize },

    #[error("insufficient data: need {need} pairs, have {have}")]
    InsufficientData { need: usize, have: usize },

    #[error("format error in record `{record}`: {reason}")]
    Format { record: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("both classes must be present")]
    SingleClass,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {need} points for perplexity {perplexity}, got {n}")]
    Perplexity { n: usize, need: usize, perplexity: f64 },

    #[error("cannot parse scenario code `{code}` at position {position}: {reason}")]
    Parse {
        code: String,
        position: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing upstream artifact: {}", .0.display())]
    Dependency(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            record: record.into(),
            reason: reason.into(),
        }
    }

    /// Wraps the error with the pipeline stage it was raised in.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_owned(),
            source: Box::new(self),
        }
    }

    /// Name of the pipeline stage this error was raised in, if any.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
