pub mod error;
pub mod estimator;
pub mod harness;
pub mod lightmath;
pub mod probe;
pub mod renderer;
pub mod scenegen;

pub use error::{LumenError, Result};
