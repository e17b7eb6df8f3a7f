//! Data-parallel execution helpers.
//!
//! Every parallel region in this crate writes disjoint output slices and keeps
//! its inner reductions in a fixed order, so results are bit-identical whether
//! the work runs on one thread or many. The `parallel` feature gates rayon;
//! without it everything below degrades to plain sequential iteration. A
//! runtime switch additionally forces the sequential path (used by
//! `--deterministic` and by the benchmark suite to compare both paths).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all helpers onto the sequential path at runtime.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    if cfg!(not(feature = "parallel")) {
        return true;
    }
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `out`.
/// Chunks are disjoint, so parallel and sequential execution agree exactly.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Run `f(i)` for `i in 0..n` where each call only touches its own outputs
/// (disjoint files, pre-sliced buffers behind unsafe-free interfaces, ...).
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            (0..n).into_par_iter().for_each(f);
            return;
        }
    }
    (0..n).for_each(f);
}

/// Map `f` over `0..n` collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_match_sequential() {
        let run = |seq: bool| {
            force_sequential(seq);
            let mut out = vec![0.0; 64];
            for_each_chunk_mut(&mut out, 8, |i, c| {
                for (j, v) in c.iter_mut().enumerate() {
                    *v = (i * 8 + j) as f64 * 0.5;
                }
            });
            force_sequential(false);
            out
        };
        assert_eq!(run(true), run(false));
    }
}
