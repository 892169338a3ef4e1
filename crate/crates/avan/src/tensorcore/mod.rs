//! Tensor math: typed tensors, compute kernels, a define-then-run graph
//! with reverse-mode differentiation, Adam, and a finite-difference
//! gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adam::{l1_prox, Adam, AdamConfig};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{update_running_stats, Evaluation, Gradients, Graph, Mode, NodeId, Op};
pub use tensor::{ParamStore, Scalar, Tensor};
