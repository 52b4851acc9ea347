//! Command-line companion to `mixedboot-core`: CSV/JSON ingestion and
//! emission, run configuration with content hashing, a rayon-backed parallel
//! driver, and the `mixedboot` binary's command implementations.

pub mod cli;
pub mod config;
pub mod ingest;
pub mod output;
pub mod parallel;
