pub mod error;
pub mod cdfp;
pub mod data;
pub mod dsop;
pub mod encoder;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};
