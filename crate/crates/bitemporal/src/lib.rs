//! Files, formats and the command-line interface around `bitemporal-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_dir;
pub mod error;
pub mod images;
pub mod manifest;
pub mod metrics_log;

pub use error::{IoError, IoResult};
