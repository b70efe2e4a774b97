//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The graph is define-by-run: every op evaluates eagerly as it is recorded,
//! so shape errors surface at the call site and control flow can inspect
//! values. [`Graph::backward`] replays the tape in reverse from a scalar
//! loss. Checkpointing and the Adam optimizer live here too since they
//! operate on the same tensors.

mod adam;
mod checkpoint;
mod graph;
pub mod gradcheck;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointError, TensorData,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{CustomOp, GradStore, Graph, TensorRef};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter '{0}'; step rejected")]
    NonFiniteGradient(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("{op}: {detail}")]
    Op { op: &'static str, detail: String },
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn op(op: &'static str, detail: impl Into<String>) -> Self {
        DiffError::Op { op, detail: detail.into() }
    }
}
