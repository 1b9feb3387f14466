use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {op} at row {row}")]
    NonFinite { op: &'static str, row: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("class {class} has {available} samples, episode needs {needed}")]
    NotEnoughSamples {
        class: u32,
        available: usize,
        needed: usize,
    },

    #[error("split has {available} classes, episode needs {needed}")]
    NotEnoughClasses { available: usize, needed: usize },

    #[error("overlapping split lists: class {0} appears twice")]
    OverlappingSplit(u32),

    #[error("infeasible transport marginals: {0}")]
    Infeasible(String),

    #[error("episode has no positive query-support pair")]
    NoPositivePairs,

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("unsupported dtype code {0}")]
    BadDtype(u8),

    #[error("rank {0} exceeds the maximum of 4")]
    RankOverflow(u8),

    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checkpoint version {found} does not match expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("unknown config key {0}")]
    UnknownKey(String),

    #[error("bad value for config key {key}: {value}")]
    BadValue { key: String, value: String },

    #[error("non-finite loss at episode seed {seed}")]
    NonFiniteLoss { seed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
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

pub type Result<T> = std::result::Result<T, Error>;
