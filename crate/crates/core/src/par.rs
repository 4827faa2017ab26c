//! Data-parallel helpers. With the `parallel` feature off every helper runs
//! sequentially and produces the same values in the same order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f` with at most `threads` workers for both model fan-out and dense
/// linear algebra. `threads == 0` means "all cores".
pub fn run_with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build thread pool");
        pool.install(|| {
            let n = rayon::current_num_threads();
            let par = if n <= 1 {
                faer::Par::Seq
            } else {
                faer::Par::rayon(n)
            };
            faer::set_global_parallelism(par);
            f()
        })
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        faer::set_global_parallelism(faer::Par::Seq);
        f()
    }
}

/// Number of workers the current context will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
