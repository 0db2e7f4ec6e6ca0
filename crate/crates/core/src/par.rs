//! Data-parallel execution with a sequential fallback.
//!
//! Every batch entry point in the crate (mining units, null fitting, batch
//! detection, Monte-Carlo loops) maps an index-preserving closure over a
//! slice and reduces the collected results in input order, so the output is
//! bit-identical whichever [`Parallelism`] is chosen.

/// Execution strategy for batch work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Rayon work-stealing pool. Falls back to sequential when the crate is
    /// built without the `parallel` feature.
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }

    /// Order-preserving map.
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Parallelism::Rayon {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Order-preserving map over `0..n`.
    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Parallelism::Rayon {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Order-preserving fallible map; the first error in input order wins.
    pub fn try_map<T, U, E, F>(self, items: &[T], f: F) -> Result<Vec<U>, E>
    where
        T: Sync,
        U: Send,
        E: Send,
        F: Fn(&T) -> Result<U, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }

    pub fn try_map_range<U, E, F>(self, n: usize, f: F) -> Result<Vec<U>, E>
    where
        U: Send,
        E: Send,
        F: Fn(usize) -> Result<U, E> + Sync + Send,
    {
        self.map_range(n, f).into_iter().collect()
    }
}
