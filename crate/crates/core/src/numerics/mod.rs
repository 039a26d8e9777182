//! Dense tensors and a small reverse-mode differentiation engine.

mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::bounded_sigmoid;

/// Default stabilizer added to the channel variance in [`Tape::spatial_norm`].
pub const DEFAULT_EPS_NORM: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("convolution kernels must be square with odd size, got {k}")]
    Kernel { k: usize },
    #[error("{op}: needs at least {need} elements, found {found}")]
    TooSmall {
        op: &'static str,
        need: usize,
        found: usize,
    },
    #[error("backward requires a scalar loss, found shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
