//! Dense matrices, seeded randomness, and the reverse-mode tape every
//! differentiable computation in the crate is built on.

mod gradcheck;
mod matrix;
pub mod rng;
mod tape;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, GradMismatch, Param, REL_ERROR_FLOOR};
pub use matrix::{column_norms, cosine, dot, matmul, mean_pool, norm, Matrix};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};
