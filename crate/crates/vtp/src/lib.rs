//! File formats, configuration and the pipeline driver behind the `vtp`
//! command-line tool.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use error::{Result, VtpError};
