pub mod error;
pub mod experiments;
pub mod features;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod mdn;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod select;
pub mod sim;

#[cfg(test)]
mod testutil;

pub use error::{FslmError, Result};
