//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records each operation of one forward pass together with what
//! its backward rule needs. [`Tape::backward`] walks the tape in reverse and
//! returns the gradients of every trainable leaf. Everything is computed in
//! 64-bit floating point.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use tape::{GeluKind, Gradients, Tape, Var};
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for {ndim}-d tensor")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        ndim: usize,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; record a new forward pass")]
    BackwardTwice,
    #[error("loss does not depend on any trainable leaf")]
    Detached,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
