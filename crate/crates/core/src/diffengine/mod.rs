//! Dense `f64` numerics with reverse-mode differentiation.
//!
//! All logarithms are natural. The op set is what the toy model and its
//! losses need: matmul, elementwise arithmetic, exp/log/SiLU, softmax,
//! reductions, gathers and scatters, slicing, concatenation, layer norm and
//! a fused cross-entropy.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, Stencil};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{cross_entropy_mean, softmax_rows, Tensor};
