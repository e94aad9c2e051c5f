pub mod costs;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;

pub use error::{Error, Result};
