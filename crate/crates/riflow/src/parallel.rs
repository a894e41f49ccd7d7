//! Data-parallel execution helpers.
//!
//! Every embarrassingly parallel loop in the crate — per-image codec and
//! attack sweeps, per-trial bound checks, per-sample batch assembly — runs
//! through [`map_indices`]. With the `parallel` feature (the default) the
//! closure fans out across the rayon pool; without it the very same call
//! degrades to a sequential loop. Results are always collected **by index**,
//! so output order, and therefore every downstream reduction, is identical
//! in both configurations: the feature flag trades wall-clock time only,
//! never bytes.
//!
//! Closures must be `Send + Sync` in both configurations so that switching
//! the feature can never change what compiles.

/// Maps `f` over `0..n`, collecting results in index order.
///
/// Runs on the rayon pool when the `parallel` feature is enabled, otherwise
/// sequentially. Deterministic output either way.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Always-sequential twin of [`map_indices`].
///
/// Exists so the bench suite can compare the parallel path against the
/// sequential fallback inside a single binary; library code should call
/// [`map_indices`] and let the feature decide.
pub fn map_indices_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_elementwise() {
        let f = |i: usize| (i as f64).sqrt() * 3.0 - 1.0;
        let par = map_indices(257, f);
        let seq = map_indices_seq(257, f);
        assert_eq!(par.len(), seq.len());
        for (a, b) in par.iter().zip(&seq) {
            assert_eq!(a.to_bits(), b.to_bits(), "results must match bit-for-bit");
        }
    }

    #[test]
    fn preserves_index_order() {
        let out = map_indices(100, |i| i * 2);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * 2);
        }
    }
}
