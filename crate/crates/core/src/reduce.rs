//! Reproducible floating-point reductions.
//!
//! Every reduction in the crate goes through a fixed chunk layout followed by
//! a pairwise tree over the chunk partials. The layout depends only on the
//! input length (deterministic mode) or on the input length and the thread
//! count (fast mode), never on how rayon happens to schedule work, so a given
//! configuration always adds the same numbers in the same order.

use rayon::prelude::*;

/// Leaf size of the summation tree. Leaves are summed with Neumaier
/// compensation.
pub const LEAF: usize = 4096;

/// How parallel partial results are laid out before being combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Chunking depends only on the problem size: bit-identical results for
    /// any thread count.
    #[default]
    Deterministic,
    /// Chunking follows the current rayon pool size: identical results for a
    /// fixed thread count, fewer partial buffers for large pools.
    Fast,
}

impl Reduction {
    /// Number of chunks a workload of `len` items is split into.
    pub fn chunk_count(self, len: usize) -> usize {
        if len == 0 {
            return 1;
        }
        match self {
            Reduction::Deterministic => len.div_ceil(LEAF * 4).clamp(1, 64),
            Reduction::Fast => (rayon::current_num_threads() * 2).clamp(1, len),
        }
    }

    /// Chunk length for `len` items under this layout.
    pub fn chunk_len(self, len: usize) -> usize {
        len.div_ceil(self.chunk_count(len)).max(1)
    }
}

/// Neumaier-compensated sum of a slice.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Pairwise combination of partials in index order.
pub fn pairwise(partials: &[f64]) -> f64 {
    match partials.len() {
        0 => 0.0,
        1 => partials[0],
        n => {
            let mid = n / 2;
            pairwise(&partials[..mid]) + pairwise(&partials[mid..])
        }
    }
}

/// Reproducible sum of `f(i)` for `i in 0..len`.
///
/// Leaves of [`LEAF`] consecutive indices are compensated-summed in parallel,
/// then the leaf partials are combined pairwise. The result is independent of
/// the thread count.
pub fn sum_map<F>(len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let leaves = len.div_ceil(LEAF);
    let leaf_sum = |leaf: usize| {
        let start = leaf * LEAF;
        let end = (start + LEAF).min(len);
        let mut buf = [0.0_f64; LEAF];
        for (slot, i) in buf.iter_mut().zip(start..end) {
            *slot = f(i);
        }
        compensated_sum(&buf[..end - start])
    };
    if leaves <= 1 {
        return if len == 0 { 0.0 } else { leaf_sum(0) };
    }
    let partials: Vec<f64> = (0..leaves).into_par_iter().map(leaf_sum).collect();
    pairwise(&partials)
}

/// Reproducible sum of a slice.
pub fn sum(values: &[f64]) -> f64 {
    sum_map(values.len(), |i| values[i])
}

/// Element-wise sum of equally sized partial vectors, combined pairwise in
/// index order.
pub fn sum_vectors(mut partials: Vec<Vec<f64>>) -> Vec<f64> {
    while partials.len() > 1 {
        let mut next = Vec::with_capacity(partials.len().div_ceil(2));
        let mut it = partials.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += *y;
                }
            }
            next.push(a);
        }
        partials = next;
    }
    partials.pop().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_recovers_small_terms() {
        let mut v = vec![1.0e16];
        v.extend(std::iter::repeat_n(1.0, 1000));
        v.push(-1.0e16);
        assert_eq!(compensated_sum(&v), 1000.0);
    }

    #[test]
    fn independent_of_thread_count() {
        let data: Vec<f64> = (0..100_003).map(|i| ((i as f64) * 0.37).sin() * 1e-3 + 1.0).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sum(&data));
        let b = four.install(|| sum(&data));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn vector_tree_sum() {
        let parts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(sum_vectors(parts), vec![9.0, 12.0]);
        assert!(sum_vectors(Vec::new()).is_empty());
    }

    #[test]
    fn chunking_is_size_driven_in_deterministic_mode() {
        let r = Reduction::Deterministic;
        assert_eq!(r.chunk_count(10), 1);
        assert_eq!(r.chunk_count(1_000_000), 62);
        assert!(r.chunk_len(1_000_000) * r.chunk_count(1_000_000) >= 1_000_000);
    }
}
