//! Chunked data-parallel helpers.
//!
//! Work is always split into the same fixed chunks and the per-chunk results
//! are combined in chunk order, so a result is bit-identical whether the
//! chunks run on the rayon pool or sequentially. With the `parallel` feature
//! disabled everything runs sequentially; with it enabled, [`force_sequential`]
//! switches to the sequential path at runtime (used by the benches).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Route all chunked work through the sequential path.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Split `0..n` into chunks of `chunk` and map each range, returning the
/// per-chunk results in order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let ranges: Vec<_> = (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect();
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return ranges.into_par_iter().map(f).collect();
        }
    }
    ranges.into_iter().map(f).collect()
}

/// Map every index independently, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
