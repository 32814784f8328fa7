//! Dense tensors, reverse-mode differentiation, finite-difference checks
//! and the Adam optimizer.

mod adam;
mod element;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod kernels;
mod params;
mod tensor;

pub use adam::Adam;
pub use element::Element;
pub use gradcheck::{finite_diff_grad, GradCheck, GradTolerance};
pub use graph::{FlopCounter, Gradients, Graph, OpKind, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
