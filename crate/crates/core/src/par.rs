//! Parallel dispatch helpers.
//!
//! Every data-parallel inner loop in the crate (corner scoring, warping,
//! residual evaluation, rendering, per-pair training passes) funnels through
//! [`map_indexed`]. With the default `rayon` feature the map runs on the
//! rayon pool; without it the same call degrades to a plain sequential loop.
//!
//! Results are always collected in index order and reductions happen
//! sequentially over the collected buffer afterwards, so outputs are
//! bit-identical whether or not the work ran in parallel.

#[cfg(feature = "rayon")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, collecting results in index order.
///
/// Parallel when the `rayon` feature is enabled (the default), sequential
/// otherwise.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "rayon")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "rayon"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential twin of [`map_indexed`], always available.
///
/// The criterion suite benches this against the parallel path; tests assert
/// the two produce bit-identical output.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        // Non-associative float work: per-index result must not depend on scheduling.
        let f = |i: usize| {
            let x = (i as f64).sin() * 1e-3 + (i as f64).sqrt();
            x * x + 1.0 / (x + 2.0)
        };
        let a = map_indexed(10_000, f);
        let b = map_indexed_seq(10_000, f);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
