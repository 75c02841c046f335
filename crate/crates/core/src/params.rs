//! Named parameter arrays and their gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::tape::Buf;

/// A collection of named weight arrays with per-array trainability.
///
/// Stores are plain value types: cloning one produces an independent
/// snapshot, which is how models are copied across threads or into
/// ensemble members.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    bufs: Vec<Buf>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register an array; returns its slot index. Panics on duplicate names.
    pub fn add(&mut self, name: &str, buf: Buf, trainable: bool) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.bufs.push(buf);
        self.trainable.push(trainable);
        self.bufs.len() - 1
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn buf(&self, index: usize) -> &Buf {
        &self.bufs[index]
    }

    pub fn buf_mut(&mut self, index: usize) -> &mut Buf {
        &mut self.bufs[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Buf, bool)> {
        self.names
            .iter()
            .zip(&self.bufs)
            .zip(&self.trainable)
            .map(|((n, b), t)| (n.as_str(), b, *t))
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(Buf::all_finite)
    }

    /// Total scalar count across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.bufs.iter().map(Buf::len).sum()
    }
}

/// Gradients aligned slot-by-slot with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    bufs: Vec<Buf>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            bufs: (0..store.len())
                .map(|i| {
                    let b = store.buf(i);
                    Buf::zeros(b.rows, b.cols)
                })
                .collect(),
        }
    }

    pub fn buf(&self, index: usize) -> &Buf {
        &self.bufs[index]
    }

    pub fn accumulate(&mut self, index: usize, g: &Buf) {
        let d = &mut self.bufs[index];
        debug_assert_eq!((d.rows, d.cols), (g.rows, g.cols));
        d.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
    }

    /// Merge another gradient store into this one.
    pub fn add_from(&mut self, other: &GradStore) {
        for (d, s) in self.bufs.iter_mut().zip(&other.bufs) {
            d.data.iter_mut().zip(&s.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for b in &mut self.bufs {
            b.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(Buf::all_finite)
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }
}
