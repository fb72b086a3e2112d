//! Switch between rayon and plain iterators.
//!
//! Every data-parallel loop in the crate goes through these helpers so the
//! `parallel` feature is the only place where scheduling is decided. The
//! closures see the same inputs in either mode, so results only differ by
//! the reduction order of the dense linear algebra.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to consecutive chunks of `data`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Applies `f` to pairs of equally sized chunks of two buffers.
pub fn for_each_chunk_pair<T, U, F>(src: &[T], dst: &mut [U], chunk_len: usize, f: F)
where
    T: Sync,
    U: Send,
    F: Fn(usize, &[T], &mut [U]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    src.par_chunks(chunk_len)
        .zip(dst.par_chunks_mut(chunk_len))
        .enumerate()
        .for_each(|(i, (s, d))| f(i, s, d));
    #[cfg(not(feature = "parallel"))]
    src.chunks(chunk_len)
        .zip(dst.chunks_mut(chunk_len))
        .enumerate()
        .for_each(|(i, (s, d))| f(i, s, d));
}

/// Maps `f` over `0..n` and collects in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return (0..n).map(f).collect();
}

/// Maps `f` over a slice and collects in order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    return items.iter().map(f).collect();
}

/// Parallelism handed to faer's dense kernels.
///
/// A one-thread pool maps to `Par::Seq`, which keeps single-threaded runs
/// bitwise reproducible.
pub fn dense_par() -> faer::Par {
    #[cfg(feature = "parallel")]
    {
        let n = rayon::current_num_threads();
        if n > 1 {
            return faer::Par::rayon(n);
        }
    }
    faer::Par::Seq
}

/// Number of worker threads the current configuration will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    return 1;
}
