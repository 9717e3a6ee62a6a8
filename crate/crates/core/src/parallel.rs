//! Execution strategy for the data-parallel loops.
//!
//! Every parallel site partitions work so that each output element is
//! produced by exactly one task with a fixed inner accumulation order, so
//! results are bitwise identical to the sequential path. Reductions across
//! tasks are collected into a vector first and folded left to right.
//!
//! With the `parallel` feature disabled everything runs on the calling thread.

/// How a kernel distributes its independent work items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Applies `f(row_index, row)` to each `width`-wide chunk of `data`.
pub fn for_each_row<F>(exec: Exec, data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    match exec {
        Exec::Sequential => data.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, r)| f(i, r))
        }
    }
}

/// Evaluates `f` on `0..n` and returns the results in index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

/// Sums `f(i)` over `0..n` in ascending index order.
pub fn ordered_sum<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Send + Sync,
{
    map_indices(exec, n, f).into_iter().fold(0.0, |acc, x| acc + x)
}
