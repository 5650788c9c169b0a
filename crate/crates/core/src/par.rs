//! Data-parallel helpers with a sequential fallback.
//!
//! Everything that fans out over documents, segments, or batch items goes
//! through this module. With the `parallel` feature (the default) the work
//! runs on rayon; without it the same closures run in a plain loop. Both
//! paths produce results in input order, and callers sum floats in that
//! order, so the build flavor never changes a numeric result.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving map over a slice.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Order-preserving map that is always sequential, independent of features.
/// The benchmark suite uses it as the baseline arm.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Run `f` on a dedicated pool of exactly `threads` workers. The speed
/// benchmark pins its thread count this way so timings are comparable across
/// machines. Without the `parallel` feature (or with `threads == 1` on a
/// 1-worker pool) the closure just runs inline.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("thread pool construction");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Number of workers the current build will actually use.
pub fn effective_threads(requested: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        requested.max(1)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        1
    }
}
