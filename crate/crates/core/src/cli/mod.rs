//! Configuration, persistence and the command-line surface.

mod checkpoint;
mod commands;
mod config;
mod dataset;

pub use checkpoint::{
    read_meta, Checkpoint, CheckpointKind, CheckpointMeta, Container, StoredTensor, FORMAT_VERSION, MAGIC,
};
pub use commands::{run, Cli, Command, Outcome};
pub use config::{parse_config, RunConfig, SEED_ENV};
pub use dataset::{dataset_from_container, dataset_to_container, load_dataset, DATASET_FILE};
