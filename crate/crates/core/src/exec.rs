//! Data-parallel execution helpers.
//!
//! Everything embarrassingly parallel in this crate (per-user inner loops,
//! episode generation, evaluation draws, fold x method cells) funnels through
//! `map_indexed`, which runs on rayon when the `parallel` feature is enabled
//! and falls back to a plain sequential loop otherwise. Results are always
//! collected in index order, so outputs are identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
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

/// Map `f` over owned items, collecting results in input order.
pub fn map_vec<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Sequential map over `0..n`. Always available; used by benches as the
/// baseline against `map_parallel`.
pub fn map_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Rayon map over `0..n`, regardless of what the `parallel` feature selected
/// for `map_indexed`. Only present when rayon is compiled in.
#[cfg(feature = "parallel")]
pub fn map_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
