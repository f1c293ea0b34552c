use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("knee angle undefined: thigh direction has no component in the shank sagittal plane")]
    UndefinedDirection,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("infeasible gait: {0}")]
    InfeasibleGait(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("correlation undefined for a constant series")]
    UndefinedCorrelation,

    #[error("reference travelled distance is zero")]
    ZeroReferenceDistance,

    #[error("empty series")]
    EmptySeries,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {message}")]
    InvalidFile { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
