//! Experiment harness for the value-expansion lab: run configuration,
//! CSV run logs, checkpoints, the experiment matrix, offline target
//! analysis and result summaries.

pub mod analysis;
pub mod config;
pub mod error;
pub mod log;
pub mod matrix;
pub mod summary;

pub use error::{LabError, Result};

/// Version string written into every run log.
pub const VERSION: &str = concat!("vexp ", env!("CARGO_PKG_VERSION"));
