//! Execution mode for data-parallel inner loops.
//!
//! With the `parallel` feature (default) row-parallel kernels and batch loops
//! run on the rayon pool; without it, or when the mode is switched to
//! [`Exec::Sequential`] at runtime, the same closures run in order on the
//! calling thread. Every parallel loop writes disjoint output slices or
//! collects results in index order, so both modes produce bit-identical
//! results.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Current process-wide execution mode.
pub fn mode() -> Exec {
    if cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed) {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

/// Switch the process-wide mode. Requesting `Parallel` without the
/// `parallel` feature is accepted and falls back to sequential execution.
pub fn set_mode(exec: Exec) {
    PARALLEL.store(exec == Exec::Parallel, Ordering::Relaxed);
}

/// Configure the global worker pool size. Only the first call has an effect.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Apply `f` to each `chunk`-sized mutable piece of `out`, passing the piece index.
pub fn for_each_chunk_mut<F>(out: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel && out.len() >= 4 * chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map `0..n` through `f`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
