pub mod autodiff;
pub mod cgm;
pub mod data;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod prompt;

pub use error::{CcpeError, Result};
