//! Config files, artifact formats and the stage runners behind the CLI.

mod artifacts;
mod config;
mod stages;

pub use artifacts::{
    read_csv, read_json, read_records, write_csv, write_json, write_records, Checkpoint, Provenance, Stamped, SCHEMA,
};
pub use config::{default_cnn, ChannelEntry, DataConfig, ExperimentConfig, Scenario, SweepConfig, SystemConfig};
pub use stages::*;
