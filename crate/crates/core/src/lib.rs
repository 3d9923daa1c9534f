pub mod cli;
pub mod dual_input;
pub mod error;
pub mod evaluator;
pub mod feature_store;
pub mod gradsuite;
pub mod losses;
pub mod moe_core;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
