//! Configuration and stage wiring for the `miss` command-line tool.

pub mod config;
pub mod stages;

pub use config::RunConfig;
pub use stages::{Run, StageError, StageResult};
