//! Experiment pipeline: generate or ingest data, label localities, train
//! global baselines and per-segment experts, fit fusion, evaluate.
//!
//! All artifacts of one run live under the configured output directory
//! next to `run_manifest.json`, which records stage keys and content hashes
//! so that `--resume` can skip finished work.

pub mod config;
mod error;
pub mod manifest;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use pipeline::Run;
