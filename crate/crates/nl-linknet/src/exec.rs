//! Execution strategy for the data-parallel kernels.
//!
//! Every kernel splits its output into disjoint chunks (a chunk is usually
//! one `(batch, channel)` plane) and fills each chunk with a fixed
//! sequential loop. Chunks never overlap, so running them on a thread pool
//! produces bit-identical results to the sequential fallback — parallelism
//! changes wall-clock time, never values.
//!
//! With the `parallel` feature disabled the same helpers compile to plain
//! loops and rayon is not linked at all.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Globally enable or disable the thread pool at runtime (`--threads 1`
/// maps to `false`). No-op without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Configure the global thread pool. `threads == 1` switches to the
/// sequential path; larger values size the rayon pool (first call wins,
/// which is fine for a CLI entry point).
pub fn set_threads(threads: usize) {
    if threads <= 1 {
        set_parallel(false);
        return;
    }
    set_parallel(true);
    #[cfg(feature = "parallel")]
    {
        // Ignore the error: the global pool can only be built once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// Run `f(chunk_index, chunk)` over disjoint `chunk_len` pieces of `data`.
pub fn for_each_chunk_mut<E, F>(data: &mut [E], chunk_len: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Independent tasks indexed `0..n`, each producing one `T`.
/// Output order is by index, independent of scheduling.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(f).collect()
}
