//! Execution-mode dispatch for data-parallel loops.
//!
//! Every parallel loop in the crate goes through these helpers. Results are
//! always collected in index order so reductions are identical whatever the
//! thread count. Without the `parallel` feature, or in [`Exec::Sequential`]
//! mode, the helpers run plain loops.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_mode(mode: Exec) {
    MODE.store(
        match mode {
            Exec::Sequential => 0,
            Exec::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn mode() -> Exec {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

/// Configure the global worker pool size. `None` reads `KLON_THREADS`,
/// defaulting to one thread. Calling this after the pool exists is a no-op.
pub fn init_threads(threads: Option<usize>) -> usize {
    let n = threads
        .or_else(|| std::env::var("KLON_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1);
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    n
}

/// Evaluate `f(i)` for `i in 0..n`, returning results in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
