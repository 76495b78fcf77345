//! Execution mode for the data-parallel inner loops (snippet scoring, batch
//! embedding, benchmark sweeps, metric aggregation).
//!
//! With the `parallel` feature the loops run on the rayon global pool; without
//! it, or with [`Execution::Sequential`], they run on the calling thread. Both
//! paths produce identical results: every parallel reduction here is either an
//! order-preserving `collect` or an associative merge of integer counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
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
    /// Order-preserving map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Folds each item into an accumulator, then merges accumulators.
    /// `merge` must be associative with `identity` as its unit.
    pub fn fold<T, A, I, F, M>(self, items: &[T], identity: I, fold: F, merge: M) -> A
    where
        T: Sync,
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(A, &T) -> A + Sync + Send,
        M: Fn(A, A) -> A + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items
                .par_iter()
                .fold(&identity, &fold)
                .reduce(&identity, &merge),
            _ => {
                // one accumulator, so nothing to merge
                let _ = merge;
                items.iter().fold(identity(), fold)
            }
        }
    }
}
