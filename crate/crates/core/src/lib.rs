pub mod dataset;
pub mod error;
pub mod eval;
pub mod mcts;
pub mod nn;
pub mod obs;
pub mod reward;
pub mod rollout;
pub mod sim;
pub mod uwdt;

pub use error::{Error, FormatError, Result};
