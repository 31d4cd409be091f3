//! Data-parallel building blocks with a sequential fallback.
//!
//! Every helper here is deterministic by construction: work items write to
//! disjoint output chunks, and cross-item reductions always happen in item
//! order on per-item partial results. The `parallel` feature therefore
//! changes wall time, never bits. The `*_seq` variants are always compiled
//! so the bench suite can compare both paths in one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f(i, chunk_i)` over `out` split into equal chunks of `chunk_len`.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    for_each_chunk_seq(out, chunk_len, f);
}

pub fn for_each_chunk_seq<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

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
    map_indexed_seq(n, f)
}

pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Per-item partials `f(i)` summed elementwise in item order. The summation
/// order is identical in both the parallel and sequential paths, so the
/// result is bit-stable across thread counts.
pub fn sum_partials<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> Vec<f64> + Sync + Send,
{
    let partials = map_indexed(n, f);
    fold_partials(len, partials)
}

pub fn sum_partials_seq<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> Vec<f64> + Sync + Send,
{
    let partials = map_indexed_seq(n, f);
    fold_partials(len, partials)
}

fn fold_partials(len: usize, partials: Vec<Vec<f64>>) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in partials {
        debug_assert_eq!(p.len(), len);
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    acc
}
