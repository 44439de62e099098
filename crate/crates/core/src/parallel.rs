//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Parallelism::Rayon`] fans work out
//! over the rayon pool. Without it, every call runs sequentially and the
//! variant is accepted but ignored, so callers never need their own `cfg`.
//! Results are always returned in input order.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// Whether work will actually be spread over threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// Ordered map over a slice.
pub fn map_ordered<T, R, F>(items: &[T], par: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect();
    }
    let _ = par;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

/// Runs `f` on a dedicated pool of `workers` threads when parallelism is
/// available, otherwise calls it inline. `workers == 0` means the global pool.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if workers > 0 {
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => return pool.install(f),
            Err(e) => {
                log::warn!("could not build a {workers}-thread pool: {e}; using the global pool")
            }
        }
    }
    let _ = workers;
    f()
}

/// Worker count that a `Rayon` run would use right now.
pub fn current_workers(par: Parallelism) -> usize {
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return rayon::current_num_threads();
    }
    let _ = par;
    1
}
