//! Data-parallel helpers with a sequential fallback.
//!
//! All heavy inner loops in the crate (convolution GEMMs, batch encoding,
//! per-query evaluation) go through this module. With the `parallel` feature
//! (default) they fan out over a rayon pool; without it they run sequentially
//! with identical results. Work is always split over disjoint output regions
//! that are each filled in a fixed order, so results are bit-identical
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of worker threads the `parallel` feature uses, honoring the
/// `HEGH_THREADS` environment variable when set. Falls back to the number of
/// available cores.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var("HEGH_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Install a global pool sized by `HEGH_THREADS`. Safe to call more than
/// once; later calls are no-ops once a pool exists.
pub fn configure_threads_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = thread_cap_from_env() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<O: Send, F: Fn(usize) -> O + Sync + Send>(n: usize, f: F) -> Vec<O> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<O, F: Fn(usize) -> O>(n: usize, f: F) -> Vec<O> {
    map_indices_seq(n, f)
}

/// Sequential reference for [`map_indices`]; always available so benches can
/// compare both paths in one build.
pub fn map_indices_seq<O, F: Fn(usize) -> O>(n: usize, f: F) -> Vec<O> {
    (0..n).map(f).collect()
}

/// Split `data` into chunks of `chunk_len` and run `f(chunk_index, chunk)` on
/// each. Chunks are disjoint, so the write pattern is race-free and the
/// result does not depend on scheduling.
#[cfg(feature = "parallel")]
pub fn for_chunks_mut<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    data: &mut [T],
    chunk_len: usize,
    f: F,
) {
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_chunks_mut<T, F: Fn(usize, &mut [T])>(data: &mut [T], chunk_len: usize, f: F) {
    for_chunks_mut_seq(data, chunk_len, f)
}

/// Sequential reference for [`for_chunks_mut`].
pub fn for_chunks_mut_seq<T, F: Fn(usize, &mut [T])>(data: &mut [T], chunk_len: usize, f: F) {
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Run `f` on a single-thread pool, forcing the parallel code paths to run
/// sequentially. Used by the bench suite as the baseline; without the
/// `parallel` feature this is just `f()`.
#[cfg(feature = "parallel")]
pub fn sequential_scope<O: Send, F: FnOnce() -> O + Send>(f: F) -> O {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn sequential_scope<O, F: FnOnce() -> O>(f: F) -> O {
    f()
}
