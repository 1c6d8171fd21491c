//! Files and command-line pipeline around `rsaforge-core`.

pub mod checkpoint;
pub mod cli;
pub mod data;
mod error;
pub mod format;
pub mod pipeline;
pub mod ppm;
pub mod report;

pub use error::{Error, Result};
