//! Deterministic parallel mapping.
//!
//! Work items map in parallel, results come back in input order, and every
//! reduction over floats happens serially on the ordered output. Results are
//! therefore independent of the worker count (including 1, and including the
//! serial build without the `parallel` feature).

#[cfg(feature = "parallel")]
use std::sync::Mutex;

#[cfg(feature = "parallel")]
static POOL: Mutex<Option<(usize, std::sync::Arc<rayon::ThreadPool>)>> = Mutex::new(None);

#[cfg(feature = "parallel")]
static WORKER_COUNT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

/// Sets the worker count for subsequent `map_ordered` calls. 0 means "use
/// the machine default"; 1 forces serial execution.
pub fn set_workers(n: usize) {
    #[cfg(feature = "parallel")]
    WORKER_COUNT.store(n, std::sync::atomic::Ordering::SeqCst);
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

#[cfg(feature = "parallel")]
fn pool_for(n: usize) -> std::sync::Arc<rayon::ThreadPool> {
    let mut guard = POOL.lock().unwrap();
    match guard.as_ref() {
        Some((count, pool)) if *count == n => pool.clone(),
        _ => {
            let pool = std::sync::Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("thread pool"),
            );
            *guard = Some((n, pool.clone()));
            pool
        }
    }
}

/// Maps `f` over `items`, preserving input order in the output.
pub fn map_ordered<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let n = WORKER_COUNT.load(std::sync::atomic::Ordering::SeqCst);
        if n == 1 {
            return items.into_iter().map(f).collect();
        }
        if n == 0 {
            return items.into_par_iter().map(f).collect();
        }
        return pool_for(n).install(|| items.into_par_iter().map(f).collect());
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved_for_any_worker_count() {
        let items: Vec<usize> = (0..64).collect();
        let serial: Vec<usize> = items.iter().map(|x| x * x).collect();
        for workers in [0, 1, 2, 3] {
            set_workers(workers);
            let got = map_ordered(items.clone(), |x| x * x);
            assert_eq!(got, serial);
        }
        set_workers(0);
    }
}
