//! Sequential vs. data-parallel execution of independent work items.
//!
//! With the `parallel` feature disabled every mode runs sequentially, so
//! callers never need their own `cfg` switches. Results always come back in
//! input order, which keeps parallel runs bit-identical to sequential ones.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon's global pool.
    #[default]
    Parallel,
    /// A dedicated pool with this many threads.
    Jobs(usize),
}

impl Execution {
    pub fn from_jobs(jobs: Option<usize>) -> Self {
        match jobs {
            None => Self::Parallel,
            Some(0 | 1) => Self::Sequential,
            Some(n) => Self::Jobs(n),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && !matches!(self, Self::Sequential)
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        {
            match self {
                Self::Sequential => items.iter().map(f).collect(),
                Self::Parallel => items.par_iter().map(f).collect(),
                Self::Jobs(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                    Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
                    Err(_) => items.iter().map(f).collect(),
                },
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.iter().map(f).collect()
        }
    }

    /// Runs two closures, concurrently when parallel execution is available.
    pub fn join<A, B, RA, RB>(self, a: A, b: B) -> (RA, RB)
    where
        A: FnOnce() -> RA + Send,
        B: FnOnce() -> RB + Send,
        RA: Send,
        RB: Send,
    {
        #[cfg(feature = "parallel")]
        {
            if self.is_parallel() {
                return rayon::join(a, b);
            }
        }
        (a(), b())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&xs, |x| x * x + 1);
        assert_eq!(seq, Execution::Parallel.map(&xs, |x| x * x + 1));
        assert_eq!(seq, Execution::Jobs(3).map(&xs, |x| x * x + 1));
    }

    #[test]
    fn jobs_mapping() {
        assert_eq!(Execution::from_jobs(Some(1)), Execution::Sequential);
        assert_eq!(Execution::from_jobs(Some(4)), Execution::Jobs(4));
        assert_eq!(Execution::from_jobs(None), Execution::Parallel);
        assert_eq!(Execution::Sequential.join(|| 1, || 2), (1, 2));
    }
}
