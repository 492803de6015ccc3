//! Execution policy for the data-parallel kernels.
//!
//! Every parallel kernel in this crate partitions work by output element
//! (one sample, one point, one trial) and reduces within an element in a
//! fixed sequential order, so `Sequential` and `Parallel` produce
//! bit-identical results. Without the `parallel` feature, `Parallel`
//! silently runs sequentially.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecPolicy {
    Sequential,
    #[default]
    Parallel,
}

impl ExecPolicy {
    /// Maps `f` over `0..n`, collecting results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            ExecPolicy::Sequential => (0..n).map(f).collect(),
            ExecPolicy::Parallel => par_map(n, f),
        }
    }

    /// Applies `f` to each `chunk`-sized slice of `out` together with its chunk index.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        match self {
            ExecPolicy::Sequential => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
            ExecPolicy::Parallel => par_chunks(out, chunk, f),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecPolicy::Parallel
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn par_chunks<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
fn par_chunks<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Bounds the global worker pool. Only the first call in a process takes effect.
pub fn init_thread_pool(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let f = |i: usize| (0..=i).map(|j| (j as f64).sqrt()).sum::<f64>();
        let a = ExecPolicy::Sequential.map(257, f);
        let b = ExecPolicy::Parallel.map(257, f);
        assert_eq!(a, b);
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 10];
        ExecPolicy::Parallel.for_each_chunk(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
