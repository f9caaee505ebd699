//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature the work runs on the rayon pool; without it,
//! or with [`Exec::Sequential`], items run in order on the calling thread.
//! Results always come back in index order, so any reduction the caller
//! performs afterwards has a fixed order.

/// Execution strategy for independent items (scenes, coordinates, runs).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// `f(0), f(1), ..., f(n - 1)` collected in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => (0..n).map(f).collect(),
        }
    }
}

/// Caps the global worker pool. Returns false if the pool was already built
/// or the crate was compiled without the `parallel` feature.
pub fn set_thread_limit(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Applies `UANET_THREADS` if set.
pub fn init_from_env() -> Option<usize> {
    let n = std::env::var("UANET_THREADS").ok()?.trim().parse::<usize>().ok()?;
    set_thread_limit(n);
    Some(n)
}
