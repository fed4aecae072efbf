//! Dense matrix arithmetic, seeded RNG, and reverse-mode autodiff.

mod matrix;
mod rng;
mod tape;

pub use matrix::{layer_norm, matmul, mean_sq_diff, relu, softmax_rows, Matrix};
pub use rng::{derive_seed, tags, Rng};
pub use tape::{Gradients, NodeId, Tape};
