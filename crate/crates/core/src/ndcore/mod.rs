//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns the gradient of every leaf. [`Graph::grad`] does the same but
//! records the backward pass itself as graph operations, so the returned
//! gradients can appear in a further loss (the critic gradient penalty needs
//! exactly this).
//!
//! ```
//! use ambiflow::ndcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_gradients, Adam, AdamState};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("operation {0} is not supported when differentiating a gradient")]
    UnsupportedSecondOrder(&'static str),
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}
