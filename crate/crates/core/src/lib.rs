pub mod backbone;
pub mod data;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod prompts;
pub mod training;

pub use error::{Error, Result};
