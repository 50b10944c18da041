//! Dense-matrix computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] and are bound into the graph by reference; after
//! [`Graph::backward`] the per-parameter gradients are pulled out as
//! [`ParamGrads`] and added into the store's gradient slots.

mod graph;
pub mod gradcheck;
pub mod linalg;
mod params;
mod tensor;

pub use graph::{sigmoid, CustomOp, Gradients, Graph, Var};
pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
