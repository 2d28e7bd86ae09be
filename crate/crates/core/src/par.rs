//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without
//! it, or when [`set_parallel`] has switched parallelism off at runtime, they run
//! the same closures in order on the calling thread. Every helper hands each
//! closure invocation a disjoint piece of work and reassembles results in index
//! order, so outputs are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many output elements the sequential path wins.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 4096;

/// Switch the rayon path on or off at runtime. Has no effect when the crate is
/// built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

/// Whether the helpers currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

#[cfg(feature = "parallel")]
fn worth_it(work: usize) -> bool {
    is_parallel() && work >= MIN_PARALLEL_WORK
}

/// Calls `f(row_index, row)` for each `width`-sized row of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if worth_it(out.len()) {
        use rayon::prelude::*;
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `0..n`, returning results in index order. `cost` is a rough
/// per-item work estimate used to decide whether to fan out.
pub fn map<T, F>(n: usize, cost: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 && worth_it(n.saturating_mul(cost.max(1))) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cost;
    (0..n).map(f).collect()
}

/// Sizes the global worker pool; 0 keeps the default (one per core). Only the
/// first call has an effect.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        // an already-initialized pool is fine
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
