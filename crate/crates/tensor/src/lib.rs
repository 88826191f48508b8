//! Small dense-tensor engine: eager ops recorded on a tape, reverse-mode
//! gradients, and an AdamW optimizer. Sized for toy transformers on CPU.

pub mod check;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} at position {position} out of range (< {bound})")]
    Index {
        op: &'static str,
        index: usize,
        position: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
