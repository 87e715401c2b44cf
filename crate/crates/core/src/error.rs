//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensorData { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: vector lengths differ ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{0}: input is empty")]
    EmptyInput(&'static str),

    #[error("unknown parameter name `{name}`")]
    UnknownParam { name: String },

    #[error("invalid model configuration: {0}")]
    ModelConfig(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("cadence gap between rows {prev_row} and {row}: expected {expected_min} minutes, got {got_min}")]
    CadenceGap {
        prev_row: usize,
        row: usize,
        expected_min: i64,
        got_min: i64,
    },

    #[error("series too short: {len} rows, need at least {need}")]
    SeriesTooShort { len: usize, need: usize },

    #[error("correlation undefined: series has zero variance")]
    ZeroVariance,

    #[error("MASE undefined: truth series is constant")]
    ConstantTruth,

    #[error("numerical divergence (non-finite loss or weights) at server epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("checkpoint does not match expected layout: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ModelConfig(..) => 2,
            Error::Divergence { .. } => 4,
            Error::Data(..)
            | Error::Csv(..)
            | Error::Json(..)
            | Error::Io(..)
            | Error::CadenceGap { .. }
            | Error::SeriesTooShort { .. }
            | Error::ZeroVariance
            | Error::ConstantTruth
            | Error::CheckpointMismatch(..)
            | Error::EmptyInput(..) => 3,
            _ => 1,
        }
    }
}
