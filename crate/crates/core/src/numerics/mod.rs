//! Dense f64 tensors, a reverse-mode autodiff tape, and serialization.

pub mod graph;
pub mod io;
pub mod tensor;

pub use graph::{Graph, NodeId, GELU_COEF, MASK_NEG};
pub use tensor::Tensor;
