//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every parallel loop in the crate goes through these functions. Reductions
//! use a fixed chunk decomposition merged in chunk order, so floating-point
//! results are bit-identical regardless of thread count or whether the
//! `parallel` feature is enabled at all.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
pub(crate) fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Maps `f` over a slice, collecting results in order.
pub(crate) fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
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

/// Chunked accumulation with a deterministic merge order.
///
/// Splits `0..n` into fixed chunks of `chunk` indices, folds each chunk into
/// its own accumulator (indices in ascending order), then merges the chunk
/// accumulators in ascending chunk order. The grouping depends only on `n`
/// and `chunk`, never on scheduling.
pub(crate) fn chunked_fold<B, Make, Fold, Merge>(
    n: usize,
    chunk: usize,
    make: Make,
    fold: Fold,
    mut merge: Merge,
) -> B
where
    B: Send,
    Make: Fn() -> B + Sync,
    Fold: Fn(&mut B, usize) + Sync,
    Merge: FnMut(&mut B, B),
{
    assert!(chunk > 0);
    let ranges: Vec<(usize, usize)> =
        (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let partials = map_slice(&ranges, |&(lo, hi)| {
        let mut acc = make();
        for i in lo..hi {
            fold(&mut acc, i);
        }
        acc
    });
    let mut out = make();
    for p in partials {
        merge(&mut out, p);
    }
    out
}
