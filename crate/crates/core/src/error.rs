use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("corpus integrity: {0}")]
    Corpus(String),

    #[error("schema fit failed for field `{field}`: {reason}")]
    SchemaFit { field: String, reason: String },

    #[error("feature pipeline: {0}")]
    Pipeline(String),

    #[error("model does not match schema: {0}")]
    ModelMismatch(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("prune refused: {0}")]
    PruneRefused(String),

    #[error("artifact `{}`: {reason}", path.display())]
    Artifact { path: PathBuf, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl ToString) -> Self {
        Error::Format {
            what,
            reason: reason.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
