//! Experiment driver: seeded runs, cross-seed aggregation and reports.

pub mod aggregate;
pub mod error;
pub mod report;
pub mod run;
pub mod spec;
pub mod svg;

pub use error::{CliError, Result};
