//! Dense networks, reverse-mode gradients, AdamW and checkpoints.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod tape;

pub use checkpoint::{Checkpoint, RngState};
pub use mlp::{ForwardCache, Mlp};
pub use optim::{AdamW, CyclicCosine, TrainConfig, Trainer};
pub use tape::{sigmoid, Real, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error("unsupported op in gradient path: {0}")]
    UnsupportedOp(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("io: {0}")]
    Io(String),
}
