//! Data-parallel map helpers with a sequential fallback.
//!
//! Every parallel site in this crate maps a function over independent output
//! indices and collects results in index order. Reductions happen inside a
//! single mapped item with a fixed summation order, never across threads, so
//! results are bit-identical whatever the thread count and identical to the
//! sequential build (`--no-default-features`).

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f` for each index in `0..n`, writing into disjoint `chunk_len`-sized
/// slices of `out`. Panics if `out.len() != n * chunk_len`.
#[cfg(feature = "parallel")]
pub fn indexed_fill<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    assert_eq!(out.len() % chunk_len.max(1), 0);
    out.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Runs `f` for each index in `0..n`, writing into disjoint `chunk_len`-sized
/// slices of `out`. Panics if `out.len() != n * chunk_len`.
#[cfg(not(feature = "parallel"))]
pub fn indexed_fill<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    assert_eq!(out.len() % chunk_len.max(1), 0);
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}
