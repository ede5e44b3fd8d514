//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks on the CPU.
//!
//! The engine is deliberately narrow: dense row-major tensors, a tape of
//! coarse ops (convolution, linear, group norm, attention, ...) with
//! hand-written adjoints, and parameters addressed by name. Matrix products
//! go through `matrixmultiply`.

pub mod float;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod store;
pub mod tensor;

pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use store::ParamStore;
pub use tensor::{ShapeError, Tensor};
