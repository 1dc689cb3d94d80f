//! Data-parallel map with a sequential fallback.
//!
//! Results are always returned in input order, so any reduction the
//! caller performs afterwards is independent of the execution mode.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// The effective mode: `Rayon` degrades to `Sequential` without the
    /// `parallel` feature.
    pub fn effective(self) -> Parallelism {
        if cfg!(feature = "parallel") {
            self
        } else {
            Parallelism::Sequential
        }
    }
}

pub fn map_range<R, Fun>(n: usize, mode: Parallelism, f: Fun) -> Vec<R>
where
    R: Send,
    Fun: Fn(usize) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub fn map<T, R, Fun>(items: &[T], mode: Parallelism, f: Fun) -> Vec<R>
where
    T: Sync,
    R: Send,
    Fun: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), mode, |i| f(&items[i]))
}
