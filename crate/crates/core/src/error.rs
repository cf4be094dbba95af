use std::io;

use thiserror::Error;

pub type Result<T, E = LiftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("dropout probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("learning-rate schedule steps start at 1")]
    ZeroStep,

    #[error("twist row {row} has near-zero norm {norm:e}; cannot normalize")]
    DegenerateTwist { row: usize, norm: f64 },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("non-finite loss {loss} at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: u64, lr: f64, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint checksum failure: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("tensor `{name}` stored with dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        found: u8,
        expected: u8,
    },
}

impl LiftError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LiftError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        LiftError::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
