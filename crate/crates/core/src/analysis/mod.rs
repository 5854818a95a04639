//! Module importance from learned token sparsity, and the selection
//! experiments built on it.

mod select;
mod strategy;
mod table;

pub use select::*;
pub use strategy::*;
pub use table::*;
