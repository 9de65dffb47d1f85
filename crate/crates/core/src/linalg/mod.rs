//! Matrix arithmetic, seeded randomness, and orthogonal initialization.

mod matrix;
mod rng;

pub use matrix::{matmul, orthogonal_init, Matrix};
pub use rng::{derive_seed, SeededRng};
