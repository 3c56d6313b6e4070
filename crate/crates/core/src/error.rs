use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmaeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: ctr={ctr} loc={loc} con={con}")]
    NonFinite {
        step: u64,
        ctr: f64,
        loc: f64,
        con: f64,
    },

    #[error("unknown {family} `{name}` (available: {available})")]
    UnknownStrategy {
        family: &'static str,
        name: String,
        available: String,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CmaeError {
    pub fn config(msg: impl Into<String>) -> Self {
        CmaeError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CmaeError::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CmaeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration problems map to exit code 1, everything else to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmaeError::Config(_) | CmaeError::UnknownStrategy { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CmaeError>;
