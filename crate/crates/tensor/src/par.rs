//! Data-parallel dispatch.
//!
//! Every kernel in this crate splits its work into independent output
//! chunks and hands them to the helpers below. With the `parallel` feature
//! the chunks run on the rayon pool; without it (or after
//! [`set_parallel(false)`](set_parallel)) they run in order on the calling
//! thread. Reductions are never split across chunks, so both paths produce
//! bitwise identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Below this many output elements a kernel stays on the calling thread.
pub const MIN_PARALLEL_LEN: usize = 1 << 14;

/// Enable or disable the rayon path at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Whether kernels currently dispatch to rayon.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f(chunk_index, chunk)` over `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && data.len() >= MIN_PARALLEL_LEN && data.len() > chunk_len {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Elementwise map into a fresh buffer.
pub fn map<F>(src: &[f32], f: F) -> Vec<f32>
where
    F: Fn(f32) -> f32 + Send + Sync,
{
    let mut out = vec![0.0f32; src.len()];
    let chunk = 4096;
    for_each_chunk(&mut out, chunk, |ci, dst| {
        let base = ci * chunk;
        let len = dst.len();
        for (d, s) in dst.iter_mut().zip(&src[base..base + len]) {
            *d = f(*s);
        }
    });
    out
}

/// Elementwise combination of two equally sized buffers.
pub fn zip_map<F>(a: &[f32], b: &[f32], f: F) -> Vec<f32>
where
    F: Fn(f32, f32) -> f32 + Send + Sync,
{
    assert_eq!(a.len(), b.len());
    let mut out = vec![0.0f32; a.len()];
    let chunk = 4096;
    for_each_chunk(&mut out, chunk, |ci, dst| {
        let base = ci * chunk;
        for (i, d) in dst.iter_mut().enumerate() {
            *d = f(a[base + i], b[base + i]);
        }
    });
    out
}

/// Evaluates `f` for every index in `0..n`, collecting results in order.
pub fn collect<R, F>(n: usize, work_per_item: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n > 1 && n * work_per_item >= MIN_PARALLEL_LEN {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}

/// Runs two closures, concurrently when the rayon path is active.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            return rayon::join(a, b);
        }
    }
    (a(), b())
}
