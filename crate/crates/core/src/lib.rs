pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod moae;
pub mod nn;
pub mod prompts;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{GammaError, Result};
