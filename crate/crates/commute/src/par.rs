//! Data-parallel helpers. With the `parallel` feature (default) the maps
//! run on rayon; without it they fall back to sequential iteration with
//! identical output order.

/// Order-preserving parallel map.
#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Always-sequential map, kept for benchmarking against the parallel path.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Run `body` on a worker pool of the given size. `workers = 0` means the
/// runtime default. Without the `parallel` feature the body just runs on
/// the current thread and `workers` is ignored.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: usize, body: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return body();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("worker pool");
    pool.install(body)
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R>(_workers: usize, body: impl FnOnce() -> R) -> R {
    body()
}
