//! Dense tensors, a reverse-mode computation record, and a finite-difference oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{finite_difference, relative_error};
pub use graph::{sigmoid, smooth_l1, Gradients, Graph, Var, MASK_NEG};
pub use tensor::Tensor;
