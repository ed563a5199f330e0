//! Data-parallel helpers. With the `parallel` feature these fan out over the
//! rayon pool; without it they run the same closures sequentially. Results
//! are always collected in index order so output never depends on
//! scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
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

/// Maps over a slice, preserving order.
pub fn map_slice<A, T, F>(items: &[A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&A) -> T + Sync + Send,
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

/// Runs `f` on a pool restricted to `jobs` threads (0 = library default).
/// Sequential builds ignore `jobs`.
pub fn with_jobs<T: Send, F: FnOnce() -> T + Send>(jobs: usize, f: F) -> T {
    #[cfg(feature = "parallel")]
    {
        if jobs == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}

/// Neumaier-compensated sum; used wherever many Monte-Carlo terms are
/// accumulated.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indices_preserves_order() {
        let out = map_indices(100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut v = vec![1e16, 1.0, -1e16];
        v.extend(std::iter::repeat(1e-3).take(1000));
        assert!((compensated_sum(v) - 2.0).abs() < 1e-9);
    }
}
