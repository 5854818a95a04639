//! Dense row-major linear algebra and a seeded generator.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible
//! for a given input.

mod matrix;
mod rng;

pub use matrix::{row_l2_norms, Matrix};
pub use rng::{seeded_init, InitScheme, Rng};
