//! Dense matrix math, the matrix exponential, the smooth acyclicity penalty,
//! and a reverse-mode differentiation tape over matrix-level primitives.

mod expm;
mod matrix;
mod tape;

pub use expm::{dag_penalty, dag_penalty_grad, matexp};
pub use matrix::Matrix;
pub use tape::{sigmoid, softmax_vec, Gradients, NodeId, Tape, PROB_FLOOR};
