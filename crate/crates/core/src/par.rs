//! Order-preserving data parallelism. With the `parallel` feature off every
//! call runs sequentially and produces the same output.

/// Whether work is spread across threads by default.
pub const ENABLED: bool = cfg!(feature = "parallel");

/// `f(0), f(1), ..` collected in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_with(ENABLED, n, f)
}

/// As [`map_indexed`], choosing the strategy at runtime.
pub fn map_indexed_with<T, F>(parallel: bool, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
