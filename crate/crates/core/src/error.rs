use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Layer or feature dimensions do not line up.
    #[error("layer {layer}: expected input dim {expected}, found {found}")]
    Dimension {
        layer: usize,
        expected: usize,
        found: usize,
    },

    /// A structurally invalid model, adapter, plan, or policy. `field` is a
    /// dotted path into the offending configuration when one is known.
    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An API called with arguments that violate its preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("backward pass requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("training diverged in stage `{stage}` at epoch {epoch}: {detail}")]
    Diverged {
        stage: String,
        epoch: usize,
        detail: String,
    },

    #[error("internal invariant failed: frozen parameters of {0} were modified")]
    FrozenMutated(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
