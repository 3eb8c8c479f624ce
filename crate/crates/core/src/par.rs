//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon; without it
//! they run sequentially. Output order always equals input order, and per-item
//! seeds are derived up front, so the two paths produce identical results.
//! The `_seq` variants are always sequential; the bench suite uses them as the
//! baseline.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_ordered_seq<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    map_ordered_seq(items, f)
}

pub fn try_map_ordered_seq<T, U, E>(
    items: &[T],
    f: impl Fn(&T) -> Result<U, E>,
) -> Result<Vec<U>, E> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn try_map_ordered<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_ordered<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    F: Fn(&T) -> Result<U, E>,
{
    try_map_ordered_seq(items, f)
}

/// Map over owned items by index. Used where building the item list is cheap
/// but the per-index work is heavy (page generation).
#[cfg(feature = "parallel")]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

pub fn map_indices_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
