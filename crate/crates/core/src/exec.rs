//! Execution strategy for the data-parallel loops of the pipeline.
//!
//! Every parallel entry point takes an [`Execution`] so the same code path can
//! be benchmarked sequentially and in parallel. Results are always collected
//! in input order, so the choice never changes an output.

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Runs on the rayon global pool. Without the `parallel` feature this
    /// degrades to [`Execution::Sequential`].
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Whether this strategy actually runs on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps a fallible `f` over `items`, returning the first error in input order.
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    /// Maps over an index range `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Folds contiguous chunks of `items` into partial accumulators and merges
    /// them left to right. `merge` must be associative for the result to be
    /// independent of chunking.
    pub fn fold_chunks<'a, T, A, F, M>(
        self,
        items: &'a [T],
        init: fn() -> A,
        fold: F,
        merge: M,
    ) -> A
    where
        T: Sync,
        A: Send,
        F: Fn(A, &'a T) -> A + Sync + Send,
        M: Fn(A, A) -> A + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            let chunk = (items.len() / (4 * rayon::current_num_threads())).max(1024);
            let partials: Vec<A> = items
                .par_chunks(chunk)
                .map(|c| c.iter().fold(init(), &fold))
                .collect();
            return partials.into_iter().fold(init(), merge);
        }
        let _ = &merge;
        items.iter().fold(init(), fold)
    }
}
