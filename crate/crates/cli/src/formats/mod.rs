//! On-disk formats. Writers emit floats at 17 significant digits; readers
//! go through serde and validate schema tags.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod json;
pub mod reports;

pub use checkpoint::{
    read_checkpoint, read_ensemble, write_checkpoint, write_ensemble, Checkpoint, Provenance,
};
pub use config::{default_treatment, read_config, RunConfig};
pub use dataset::{export_csv, import_csv, read_dataset, write_dataset};
