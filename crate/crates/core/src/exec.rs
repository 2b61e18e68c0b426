//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's global
//! pool; without it they run the identical closures sequentially. Every helper
//! writes disjoint outputs in index order, so results are bit-identical either
//! way. [`Parallelism`] lets a caller pick the path at runtime, which is what
//! the benches use to compare the two.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runtime choice of execution strategy for the coarse-grained sweeps
/// (ray shards, distance-grid voxels, visibility oracles).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    /// True when this strategy will actually use worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// `(0..n).map(f).collect()`, parallel when requested and available.
pub fn map_range<R, F>(n: usize, par: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces.
pub fn for_chunks_mut<T, F>(data: &mut [T], chunk: usize, par: Parallelism, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = par;
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Work-size threshold (in multiply-adds) below which kernels stay sequential.
pub const KERNEL_PAR_THRESHOLD: usize = 1 << 16;

/// Strategy for inner numeric kernels given their approximate work size.
pub fn kernel_parallelism(work: usize) -> Parallelism {
    if work >= KERNEL_PAR_THRESHOLD {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    }
}
