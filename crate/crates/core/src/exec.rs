//! Execution policy for the data-parallel loops in the pipeline.
//!
//! Every hot loop (grid-point distance queries, per-sample convolution,
//! per-design labeling, multi-start optimization) goes through [`Exec`].
//! With the `parallel` feature the `Parallel` policy dispatches to rayon;
//! without it both policies run sequentially. Results are always collected
//! in index order, so output never depends on the policy.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Map `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Map `f` over a slice, returning results in element order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Run `f` on consecutive `chunk`-sized pieces of `out`, passing the
    /// chunk index. Each chunk is written by exactly one call.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => out
                .par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
            _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }
}

/// Configure the global worker pool size. No-op without the `parallel` feature.
pub fn set_threads(n: usize) -> crate::Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| crate::Error::Usage(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let a = Exec::Sequential.map(100, |i| (i as f64).sqrt());
        let b = Exec::Parallel.map(100, |i| (i as f64).sqrt());
        assert_eq!(a, b);

        let mut x = vec![0usize; 37];
        let mut y = vec![0usize; 37];
        Exec::Sequential.for_each_chunk(&mut x, 5, |i, c| c.iter_mut().for_each(|v| *v = i));
        Exec::Parallel.for_each_chunk(&mut y, 5, |i, c| c.iter_mut().for_each(|v| *v = i));
        assert_eq!(x, y);
        assert_eq!(x[36], 7);
    }
}
