//! Threaded executor for the core crate's parallel sections.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ctp_core::exec::{Job, ParallelMap};

/// Scoped worker pool; job results are joined by index, so output is
/// identical to the serial executor regardless of scheduling.
#[derive(Debug, Clone, Copy)]
pub struct ThreadPool {
    pub workers: usize,
}

impl ThreadPool {
    pub fn new(workers: usize) -> Self {
        ThreadPool {
            workers: workers.max(1),
        }
    }

    /// Worker count from `CTP_WORKERS`, falling back to the machine's
    /// available parallelism.
    pub fn from_env() -> Self {
        let workers = std::env::var("CTP_WORKERS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|w| *w > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        ThreadPool::new(workers)
    }
}

impl ParallelMap for ThreadPool {
    fn run<'a, T: Send + 'a>(&self, jobs: Vec<Job<'a, T>>) -> Vec<T> {
        let n = jobs.len();
        if self.workers <= 1 || n <= 1 {
            return jobs.into_iter().map(|j| j()).collect();
        }
        let slots: Vec<Mutex<Option<Job<'a, T>>>> =
            jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
        let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..self.workers.min(n) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let job = slots[i].lock().unwrap().take().expect("job taken once");
                    let out = job();
                    *results[i].lock().unwrap() = Some(out);
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("job completed"))
            .collect()
    }
}
