//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! then sweeps the record in reverse and accumulates gradients on leaves
//! created with [`Graph::param`]. Gradients accumulate across repeated
//! `backward` calls until [`Graph::zero_grad`].
//!
//! Broadcasting is limited to one-element operands. `log` clamps its operand
//! to at least [`LOG_EPS`] and `div` keeps `|denominator| >= DIV_EPS`.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{BinaryKind, CustomOp, Graph, RowTaps, UnaryKind, Var, DIV_EPS, LOG_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

impl DiffError {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Contract { op, msg: msg.into() }
    }
}
