//! Configuration, persistence and the staged experiment pipeline.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod records;

pub use config::{load_config, parse_config, ExperimentConfig, LoadedConfig};
pub use manifest::{RunManifest, StageRecord, StageStatus};
pub use pipeline::{run_pipeline, run_until, Stage};
pub use records::{load_records, persist_records, Record};
