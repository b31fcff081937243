//! Benchmark tasks, diagnostics, and experiment drivers on top of
//! `mapguide-core`. The `lab` binary is a thin CLI over [`experiments`].

pub mod checks;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod problem;
pub mod report;
pub mod tasks;

pub use config::RunSpec;
pub use error::{ConfigError, LabError, Result};
pub use problem::Problem;
pub use tasks::TaskKind;
