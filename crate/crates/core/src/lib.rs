pub mod cluster;
pub mod diffnet;
pub mod embed;
pub mod env;
pub mod error;
pub mod eval;
pub mod kg;
pub mod longpath;
pub mod policy;
pub mod reward;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
