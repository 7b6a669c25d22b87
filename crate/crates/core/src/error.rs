use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Model or layer shapes do not fit together.
    #[error("configuration error in layer `{layer}`: {msg}")]
    Config { layer: String, msg: String },

    /// A caller-supplied argument is out of its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A file on disk is malformed. `offset` is the byte position where parsing failed.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or files (as opposed to bad arguments).
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Io { .. })
    }
}
