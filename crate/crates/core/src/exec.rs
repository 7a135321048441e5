//! Sequential/parallel execution switch for the data-parallel inner loops.
//!
//! All hot loops are "fill an output slice by index" shaped, and every
//! reduction sums a materialized buffer in index order, so the parallel and
//! sequential paths produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon work-stealing over indices. Falls back to sequential when the
    /// `parallel` feature is disabled.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// `out[i] = f(i)` for every index.
pub fn fill_indexed<T, F>(mode: ExecMode, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match mode {
        ExecMode::Sequential => {
            for (i, slot) in out.iter_mut().enumerate() {
                *slot = f(i);
            }
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            out.par_iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
        }
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => {
            for (i, slot) in out.iter_mut().enumerate() {
                *slot = f(i);
            }
        }
    }
}

/// Collect `f(0..n)` into a vector.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send + Default + Clone,
    F: Fn(usize) -> T + Sync,
{
    let mut out = vec![T::default(); n];
    fill_indexed(mode, &mut out, f);
    out
}

/// Deterministic sum of `f(0..n)`: terms are materialized and added in index
/// order regardless of the execution mode.
pub fn sum_indexed<F>(mode: ExecMode, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    map_indexed(mode, n, f).iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let f = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64);
        let a = sum_indexed(ExecMode::Sequential, 10_000, f);
        let b = sum_indexed(ExecMode::Parallel, 10_000, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
