//! Execution policy for the data-parallel loops (Monte Carlo trials, audit
//! samples, study repeats).
//!
//! Every parallel reduction in this crate either gathers results in index
//! order or reduces with an associative and commutative operation on
//! integers, so results never depend on the policy or the worker count.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Plain iterator on the calling thread.
    Sequential,
    /// Rayon work stealing on the current pool. Falls back to
    /// [`Exec::Sequential`] when the `parallel` feature is disabled.
    #[default]
    Parallel,
}

impl Exec {
    /// `true` when this policy actually runs on the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps every index and folds with `reduce`, which must be associative
    /// and commutative for the result to be schedule independent.
    pub fn map_reduce<T, F, R>(self, n: usize, identity: T, f: F, reduce: R) -> T
    where
        T: Send + Sync + Clone,
        F: Fn(usize) -> T + Sync + Send,
        R: Fn(T, T) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n)
                .into_par_iter()
                .map(f)
                .reduce(|| identity.clone(), &reduce);
        }
        (0..n).map(f).fold(identity, reduce)
    }
}
