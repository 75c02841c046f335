//! Pluggable parallelism.
//!
//! Core algorithms that fan out independent jobs (the per-round model
//! trainings of causal identification, per-member ensemble passes, dataset
//! simulation) go through [`ParallelMap`]. The crate ships a serial
//! implementation; `ctp-cli` provides a threaded one. Jobs carry their own
//! RNG substreams and results are joined by index, so outputs are identical
//! whichever implementation runs them.

use alloc::boxed::Box;
use alloc::vec::Vec;

/// A unit of work producing `T`.
pub type Job<'a, T> = Box<dyn FnOnce() -> T + Send + 'a>;

pub trait ParallelMap: Sync {
    /// Run all jobs, returning results in job order.
    fn run<'a, T: Send + 'a>(&self, jobs: Vec<Job<'a, T>>) -> Vec<T>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct SerialMap;

impl ParallelMap for SerialMap {
    fn run<'a, T: Send + 'a>(&self, jobs: Vec<Job<'a, T>>) -> Vec<T> {
        jobs.into_iter().map(|job| job()).collect()
    }
}
