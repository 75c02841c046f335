//! Causal trajectory prediction over irregular longitudinal data.
//!
//! The crate trains ODE-based trajectory predictors whose per-feature
//! derivative networks are constrained toward a sparse, acyclic causal
//! structure, stabilizes the recovered graph by multi-model voting, and
//! estimates treatment-effect bounds with a min-max-trained model ensemble.
//!
//! Everything here is pure computation over `f64` arrays: no IO, no threads.
//! The crate is `no_std` (with `alloc`); IO, file formats and the CLI live in
//! the companion `ctp-cli` crate, which also supplies a threaded
//! [`exec::ParallelMap`] implementation for the parallel sections.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod causal_id;
pub mod dynsim;
pub mod error;
pub mod eval;
pub mod exec;
pub mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod treatment;

pub use error::CtpError;

/// Crate-wide result type.
pub type Result<T> = core::result::Result<T, CtpError>;
