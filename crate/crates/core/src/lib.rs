pub mod adapt;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod inventory;
pub mod metrics;
pub mod model;
pub mod synth;

pub use error::{Error, ErrorCategory, Result};
