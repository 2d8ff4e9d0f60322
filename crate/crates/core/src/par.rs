//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always cut into the same fixed chunks and the per-chunk results are
//! returned in index order, so any reduction the caller performs over them runs
//! in one fixed order. Output is therefore bit-identical whether the chunks ran
//! on a rayon pool or in a plain loop. Without the `parallel` feature every
//! call takes the sequential path.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Execution mode for the batch kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// Whether this mode will actually fan out on the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Splits `0..n` into consecutive ranges of at most `chunk` elements.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}

/// Maps `f` over the chunks of `0..n`, results in chunk order.
pub fn map_chunks<T, F>(exec: Exec, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n, chunk);
    map_items(exec, ranges, f)
}

/// Maps `f` over `0..n`, results in index order.
pub fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_items(exec, (0..n).collect(), f)
}

fn map_items<I, T, F>(exec: Exec, items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = exec;
    items.into_iter().map(f).collect()
}
