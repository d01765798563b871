use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("computation record already consumed by a previous backward pass")]
    RecordConsumed,

    #[error("batch norm needs at least two values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("batch norm running statistics are uninitialized")]
    UninitializedStats,

    #[error("label {label} out of range 1..={classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("gradient check rejected: {0}")]
    NonDeterministic(String),

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("label map is {label_h}x{label_w} but scene is {scene_h}x{scene_w}")]
    DimensionMismatch {
        scene_h: usize,
        scene_w: usize,
        label_h: usize,
        label_w: usize,
    },

    #[error("pixel ({row}, {col}) outside {height}x{width} scene")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("pixel ({row}, {col}) is unlabeled")]
    Unlabeled { row: usize, col: usize },

    #[error("pixel ({row}, {col}) appears in both train and test splits")]
    SplitOverlap { row: usize, col: usize },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
