//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature (default) work is spread over a dedicated
//! rayon pool; without it, or with one worker, everything runs on the
//! calling thread. Results always come back in index order, so callers that
//! reduce them sequentially get bitwise-identical output for any worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Workers {
    count: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workers").field("count", &self.count).finish()
    }
}

impl Workers {
    /// `0` means one worker per available core.
    pub fn new(count: usize) -> Self {
        let count = if count == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            count
        };
        #[cfg(feature = "parallel")]
        {
            let pool = (count > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(count)
                    .build()
                    .expect("thread pool")
            });
            Workers { count, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Workers { count }
        }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// `(0..len).map(f)` with results in index order.
    pub fn map<R, F>(&self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..len).into_par_iter().map(&f).collect());
        }
        (0..len).map(f).collect()
    }
}
