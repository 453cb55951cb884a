use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced ({detail})")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input too short: need at least {min} frames, got {got}")]
    TooShort { min: usize, got: usize },

    #[error("projected frame has zero norm and cannot be normalized")]
    DegenerateProjection,

    #[error("mask selects no loss positions")]
    NoLossPositions,

    #[error("time axes misaligned: model produced {model_len} steps, targets have {target_len}")]
    Alignment { model_len: usize, target_len: usize },

    #[error("parameter budget {target} unreachable for {kind}: closest achievable is {closest}")]
    InfeasibleBudget {
        kind: String,
        target: usize,
        closest: usize,
    },

    #[error("allocation of {requested} bytes exceeds meter limit of {limit} bytes")]
    OutOfMemory { requested: usize, limit: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
