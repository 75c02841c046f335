//! IO, file formats, threading, and pipeline stages for the causal
//! trajectory prediction crate. The `ctp` binary is a thin wrapper over
//! [`pipeline`].

pub mod error;
pub mod exec;
pub mod formats;
pub mod pipeline;

pub use error::{CliError, CliResult};
