//! Deterministic data-parallel helpers.
//!
//! The crate's hot loops (per-pixel rendering, per-voxel aggregation,
//! nearest-neighbor queries) are expressed through these helpers. With the
//! `parallel` feature (default) they run on rayon; without it they run
//! sequentially over the same fixed chunking, so both builds produce
//! bit-identical floating-point results: chunk boundaries never depend on
//! thread count and partial results are always combined in chunk order.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by the reduction helpers when callers have no better
/// granularity to offer. Small enough to load-balance 64x64 renders, large
/// enough to amortize per-chunk setup.
pub const DEFAULT_CHUNK: usize = 1024;

fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0, "chunk size must be positive");
    (0..n)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(n))
        .collect()
}

/// Map `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fold fixed-size chunks of `0..n` with `fold_chunk`, then merge the
/// per-chunk accumulators strictly in chunk order.
pub fn fold_chunks<A, F, M>(n: usize, chunk: usize, fold_chunk: F, merge: M) -> Option<A>
where
    A: Send,
    F: Fn(Range<usize>) -> A + Sync + Send,
    M: FnMut(A, A) -> A,
{
    let ranges = chunk_ranges(n, chunk);
    #[cfg(feature = "parallel")]
    let partials: Vec<A> = ranges.into_par_iter().map(fold_chunk).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<A> = ranges.into_iter().map(fold_chunk).collect();

    let mut merge = merge;
    partials.into_iter().reduce(|a, b| merge(a, b))
}

/// `map_indexed` over a slice.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
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

/// Whether this build runs the helpers on rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
