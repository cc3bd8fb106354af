//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] runs on the
//! rayon pool; without it every helper runs sequentially. Callers derive any
//! randomness from the item index, so both modes give identical results.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `f(i)` for `i in 0..n`, collected in index order.
pub fn try_map_range<U, F>(exec: Execution, n: usize, f: F) -> Result<Vec<U>>
where
    U: Send,
    F: Fn(usize) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`try_map_range`] but keeps per-item failures.
pub fn map_range<U, F>(exec: Execution, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// `f(i, &mut items[i])` for every item.
pub fn try_for_each_mut<T, F>(exec: Execution, items: &mut [T], f: F) -> Result<()>
where
    T: Send,
    F: Fn(usize, &mut T) -> Result<()> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter_mut().enumerate().try_for_each(|(i, item)| f(i, item));
    }
    let _ = exec;
    items.iter_mut().enumerate().try_for_each(|(i, item)| f(i, item))
}

/// Run `f` inside a pool capped at `threads` workers (parallel builds only).
pub fn with_thread_cap<U: Send, F: FnOnce() -> U + Send>(threads: Option<usize>, f: F) -> U {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|n| *n > 0) {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let a = map_range(Execution::Sequential, 100, |i| i * i);
        let b = map_range(Execution::Parallel, 100, |i| i * i);
        assert_eq!(a, b);
        let mut xs = vec![0usize; 50];
        try_for_each_mut(Execution::Parallel, &mut xs, |i, x| {
            *x = i + 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(xs[49], 50);
    }
}
