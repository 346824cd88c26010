//! Config-driven experiment runner for the `seqrec` library.

pub mod config;
pub mod experiment;
pub mod report;
pub mod review_cmd;

pub use config::ExperimentConfig;
