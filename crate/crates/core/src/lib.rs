pub mod cli;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod signal;
pub mod training;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
