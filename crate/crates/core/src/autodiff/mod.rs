//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: operands always exist before the node that consumes
//! them. [`Graph::backward`] walks the tape once in reverse.

mod graph;
pub mod gradcheck;

pub use graph::{Fault, Gradients, Graph, Padding, Var};
