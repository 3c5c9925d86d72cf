//! Metric learning with fixed- and adaptive-margin triplet losses.

pub mod data_io;
pub mod embed_net;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
