//! Data-parallel map with a sequential fallback.
//!
//! With the default `parallel` feature, [`par_map`] fans independent items
//! out over rayon; order of the returned vector always matches the input, so
//! callers can combine results in a fixed order and stay bit-deterministic.
//! Without the feature the same code paths run sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is active.
/// The output order matches the input order.
#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Always-sequential map; the baseline the benches compare [`par_map`] against.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Fallible variant of [`par_map`]: evaluates every item, then surfaces the
/// first error in input order so failures are deterministic.
pub fn try_par_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    let results = par_map(items, f);
    results.into_iter().collect()
}
