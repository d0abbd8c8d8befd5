//! Row-parallel helpers.
//!
//! Every kernel in the crate writes disjoint output rows, so the parallel and
//! sequential paths produce bit-identical results. With the `parallel`
//! feature disabled these fall back to plain iterators.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of rows before work is split across threads.
#[cfg(feature = "parallel")]
const MIN_PAR_ROWS: usize = 64;

/// Calls `f(row_index, row)` for each `cols`-wide row of `out`.
pub fn for_each_row<F>(out: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() / cols >= MIN_PAR_ROWS {
            out.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(r, row)| f(r, row));
            return;
        }
    }
    out.chunks_mut(cols).enumerate().for_each(|(r, row)| f(r, row));
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if n >= 2 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Maps each element of `items` through `f`, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() >= 2 {
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Whether this build splits work across threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
