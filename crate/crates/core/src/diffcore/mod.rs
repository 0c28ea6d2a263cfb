//! Dense 64-bit tensors and a small reverse-mode differentiation tape.
//!
//! The tape is generic over [`Scalar`], so the same graph code runs over
//! `f64` for gradients and over [`Dual`] for Hessian-vector and mixed
//! second-derivative products (needed by the gradient penalties).

mod check;
mod graph;
mod matrix;
mod params;
mod scalar;

pub use check::{finite_diff_check, relative_error, RELATIVE_FLOOR};
pub use graph::{ComputeNode, Graph, NodeId, OpKind};
pub use matrix::{DenseMatrix, Matrix};
pub use params::ParameterVector;
pub use scalar::{Dual, Scalar};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },
    #[error("input node {0} was not bound")]
    UnboundInput(usize),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("expected a scalar output, got shape {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("layout error: {0}")]
    Layout(String),
}

impl GraphError {
    pub(crate) fn shape(node: usize, op: &'static str, detail: impl Into<String>) -> Self {
        GraphError::Shape { node, op, detail: detail.into() }
    }
}
