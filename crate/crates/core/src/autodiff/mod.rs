//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter as
//! leaves; only leaves created with `requires_grad = true` receive gradients
//! when [`Tape::backward`] runs from a scalar loss.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} array, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {ndim}")]
    Axis {
        op: &'static str,
        axis: usize,
        ndim: usize,
    },
    #[error("range {start}..{end} out of bounds for length {len}")]
    Range { start: usize, end: usize, len: usize },
    #[error("{op}: input {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{0}")]
    Contract(String),
}
