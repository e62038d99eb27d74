use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("gradient query target #{0} was not retained before the forward pass")]
    NotRetained(usize),

    #[error("gradient query source must be a scalar, got shape {0:?}")]
    NonScalarSource(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batchnorm in train mode needs batch size >= 2, got {0}")]
    BatchTooSmall(usize),

    #[error("IDX parse error at byte {offset}: {msg}")]
    Idx { offset: usize, msg: String },

    #[error("class {0} has no examples")]
    EmptyClass(usize),

    #[error("no prototype for class {0}")]
    MissingPrototype(usize),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
