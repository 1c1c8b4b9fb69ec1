//! Dense matrices and the reverse-mode autodiff tape built on them.

mod gradcheck;
mod graph;
mod matrix;

pub use gradcheck::{grad_check, numeric_gradient};
pub use graph::{Graph, Node, NodeId, Op};
pub use matrix::Matrix;

pub(crate) use graph::cross_entropy_forward;
