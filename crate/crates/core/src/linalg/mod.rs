//! Dense matrices and seeded random streams.

mod matrix;
mod rng;

pub use matrix::{axpy, Matrix};
pub use rng::{purpose, stream_id, SeededRng};
