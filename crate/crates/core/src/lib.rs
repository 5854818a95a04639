pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod numkernel;
pub mod peft;
pub mod tasks;
pub mod tau_opt;
pub mod trainer;
pub mod tsgate;

pub use error::{Error, Result};
