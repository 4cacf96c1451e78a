//! Replicate/batch execution drivers.
//!
//! With the `parallel` feature (default) [`map_indexed`] fans work out over
//! the rayon pool; without it the same call runs sequentially. Results are
//! collected in index order and every work item owns its RNG substream, so
//! the two modes produce bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Apply `f` to `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Sequential driver, available regardless of features. The criterion bench
/// compares this against [`map_indexed`] on the same workload.
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(map_indexed(100, f), map_indexed_sequential(100, f));
    }
}
