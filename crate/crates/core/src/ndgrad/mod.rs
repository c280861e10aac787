//! Dense `f32` tensors and a tape-based reverse-mode differentiator.
//!
//! The op set is deliberately small: exactly what the denoiser, the
//! classifier, the feature network and the guidance losses need. A
//! [`Graph`] records values in evaluation order; [`Graph::backward`] walks
//! the tape once in reverse and returns gradients for every leaf.
//!
//! ```
//! use maskdiff::ndgrad::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.square(x).unwrap();
//! let half = g.scale(sq, 0.5).unwrap();
//! let loss = g.sum(half).unwrap();
//! let dx = g.backward(loss).unwrap().wrt(x);
//! assert_eq!(dx.data(), &[1.0, -2.0, 3.0]);
//! ```
//!
//! All loops run in a fixed order, so evaluating the same graph twice gives
//! bit-identical values and gradients.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{grad, Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}
