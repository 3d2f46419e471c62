//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the work is spread over the rayon pool that is
//! current at the call site; without it the same closures run in a plain
//! loop. Results always come back in input order, so both builds produce
//! identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item and collects in order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

/// Applies `f` to consecutive index ranges of length `chunk` over `0..n` and
/// concatenates the per-chunk outputs in order.
pub fn map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> Vec<R> + Sync + Send,
{
    let chunk = chunk.max(1);
    let ranges: Vec<_> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    map(&ranges, |r| f(r.clone())).into_iter().flatten().collect()
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
