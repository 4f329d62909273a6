//! Minimal differentiable tensor substrate.
//!
//! Scalars are `f64` throughout. Forward evaluation is deterministic: every
//! reduction sums in ascending index order and contractions reduce their
//! summed labels in row-major order.

mod contract;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{Gradients, Graph, Var};
pub use params::{BoundParams, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{bce_term};

#[cfg(test)]
mod tests;
