//! Data-parallel map with a sequential fallback.
//!
//! Ensemble work in this crate (path simulation, per-state lattice updates,
//! sampled certification) consists of independent pure computations whose
//! results are then reduced in index order, so the parallel and sequential
//! paths produce bit-identical output. The `parallel` feature (default) pulls
//! in rayon; without it every entry point compiles to the sequential loop.

/// Sequential indexed map — always available, used as the reference path.
pub fn map_seq<U: Send, F: Fn(usize) -> U + Sync>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

/// Parallel indexed map over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_par<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Indexed map using the parallel path when compiled in, else sequential.
#[cfg(feature = "parallel")]
pub fn map_indexed<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    // Below this size the fork/join overhead dominates any win.
    const PAR_THRESHOLD: usize = 16;
    if n < PAR_THRESHOLD {
        map_seq(n, f)
    } else {
        map_par(n, f)
    }
}

/// Indexed map using the parallel path when compiled in, else sequential.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    map_seq(n, f)
}

/// Configure the global worker pool size. Returns false if the pool was
/// already initialized (harmless: the existing size stays in effect) or if
/// the crate was built without the `parallel` feature.
pub fn configure_jobs(jobs: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        false
    }
}
