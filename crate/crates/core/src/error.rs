use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by every module of the crate.
///
/// Messages are prefixed with the subsystem that produced them so that the
/// command-line front end can surface them without extra context.
#[derive(Debug, Error)]
pub enum Error {
    #[error("autodiff: layer {layer} ({kind}): expected input {expected}, got {actual:?}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("tensor: {0}")]
    Tensor(String),

    #[error("model: invalid topology: {0}")]
    Topology(String),

    #[error("model: {0}")]
    Model(String),

    #[error("data: {0}")]
    Data(String),

    #[error("data: augmentation refused on a {0} split (leakage guard)")]
    Leakage(&'static str),

    #[error("training: {0}")]
    Training(String),

    #[error("attribution: {0}")]
    Attribution(String),

    #[error("evaluation: {metric} is undefined: {reason}")]
    Undefined {
        metric: &'static str,
        reason: String,
    },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("malformed {format} file {path}: {reason}")]
    Format {
        format: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("cli: {0}")]
    Cli(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
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
}
