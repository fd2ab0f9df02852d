//! Reverse-mode differentiation for the codec networks.

mod graph;
pub mod kernels;
mod ops;

pub use graph::{Gradients, Graph, Var};
