//! File formats, image IO and the command-line driver for `caidd-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod images;
pub mod report;

pub use caidd_core;
pub use error::{Error, Result};
