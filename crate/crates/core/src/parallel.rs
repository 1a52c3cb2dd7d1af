//! Data-parallel helpers for the plain-`f64` paths. With the `parallel`
//! feature (default) these fan out over rayon; without it they are plain
//! sequential loops with identical, order-preserving results. Tape-based
//! code never goes through here: the tape is single-threaded by design.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `(0..n).map(f)` collected in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Sum of `f(i)` for `i in 0..n`. Reduction order differs between the two
/// builds, so callers must treat the result as mathematically, not
/// bitwise, deterministic.
#[cfg(feature = "parallel")]
pub fn sum_indexed<F: Fn(usize) -> f64 + Sync + Send>(n: usize, f: F) -> f64 {
    (0..n).into_par_iter().map(f).sum()
}

#[cfg(not(feature = "parallel"))]
pub fn sum_indexed<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    (0..n).map(f).sum()
}
