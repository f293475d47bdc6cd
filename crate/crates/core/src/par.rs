//! Execution backend for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without
//! it, or when [`Backend::Sequential`] is requested, they run in order on the
//! calling thread. Every helper writes each output slot from exactly one
//! closure call, so results are bit-identical across backends.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work below this many scalar operations is not worth a rayon split.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    Sequential,
    #[default]
    Parallel,
}

impl Backend {
    /// `Parallel` degrades to sequential when the crate is built without rayon.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Backend::Parallel
    }

    #[cfg(feature = "parallel")]
    fn use_threads(self, work: usize) -> bool {
        self.is_parallel() && work >= MIN_PARALLEL_WORK
    }

    /// Fills `out` in chunks of `chunk` elements; `f(chunk_index, chunk)`.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, work: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.use_threads(work) {
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        let _ = work;
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Ordered map over `0..n`.
    pub fn map_range<R, F>(self, n: usize, work_per_item: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.use_threads(n.saturating_mul(work_per_item)) && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
        let _ = work_per_item;
        (0..n).map(f).collect()
    }

    /// Ordered map over `0..n` for closures that can fail. The first error in
    /// index order is returned.
    pub fn try_map_range<R, E, F>(self, n: usize, work_per_item: usize, f: F) -> Result<Vec<R>, E>
    where
        R: Send,
        E: Send,
        F: Fn(usize) -> Result<R, E> + Sync + Send,
    {
        self.map_range(n, work_per_item, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backends_agree() {
        let f = |i: usize| (i as f64).sin() * 3.0;
        let a = Backend::Sequential.map_range(50_000, 1, f);
        let b = Backend::Parallel.map_range(50_000, 1, f);
        assert_eq!(a, b);

        let mut x = vec![0.0f64; 70_000];
        let mut y = vec![0.0f64; 70_000];
        let g = |ci: usize, c: &mut [f64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (ci * 1000 + j) as f64 * 0.5;
            }
        };
        Backend::Sequential.for_each_chunk(&mut x, 1000, 70_000, g);
        Backend::Parallel.for_each_chunk(&mut y, 1000, 70_000, g);
        assert_eq!(x, y);
    }

    #[test]
    fn try_map_reports_first_error() {
        let r: Result<Vec<usize>, usize> =
            Backend::Parallel.try_map_range(100, 1 << 20, |i| if i % 30 == 29 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(29));
    }
}
