//! Dense `f64` arrays, a recorded tape for reverse-mode gradients, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};
pub use graph::{sigmoid, softmax_row, softplus, Activation, Gradients, Graph, Var};
pub use params::{ParamId, ParamSet, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
