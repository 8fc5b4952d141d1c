//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) batch helpers run on the rayon
//! pool; without it they degrade to plain iterators. Output order always
//! matches input order, and reductions are performed in input order, so
//! results are bit-identical between the two modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch helper should execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
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
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => (0..n).map(f).collect(),
        }
    }

    /// Maps fixed-size chunks. Chunk boundaries depend only on `chunk`, never
    /// on the thread count.
    pub fn map_chunks<T, U, F>(self, items: &[T], chunk: usize, f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&[T]) -> U + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            Execution::Sequential => items.chunks(chunk).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_chunks(chunk).map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            Execution::Parallel => items.chunks(chunk).map(f).collect(),
        }
    }
}

/// Maps with the default execution mode.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    Execution::default().map(items, f)
}

pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    Execution::default().map_range(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Execution::Sequential.map(&xs, |x| x * x);
        let b = Execution::Parallel.map(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[10], 100);

        let c = Execution::Parallel.map_chunks(&xs, 64, |c| c.iter().sum::<u64>());
        let d = Execution::Sequential.map_chunks(&xs, 64, |c| c.iter().sum::<u64>());
        assert_eq!(c, d);
        assert_eq!(c.len(), 16);
    }
}
