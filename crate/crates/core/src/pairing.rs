//! Closed-form bijection between a linear pair index `p` and an unordered
//! channel pair `(i, j)`, `i < j`, enumerated row-major over the strict
//! upper triangle, plus the parity-balanced per-block pair iteration.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// Number of unordered pairs among `n` channels.
pub const fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Linear index of the first pair in row `i`, i.e. `i(2n - i - 1)/2`.
#[inline]
fn row_start(i: u64, n: u64) -> u64 {
    i * (2 * n - i - 1) / 2
}

/// Maps `p` to the `p`-th pair `(i, j)` with `i < j < n`.
///
/// The row is recovered as `floor(((2n-1) - sqrt((2n-1)^2 - 8p)) / 2)`
/// using an exact integer square root, then nudged so that
/// `row_start(i) <= p < row_start(i + 1)` holds exactly.
pub fn pair_from_index(p: usize, n: usize) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(invalid_arg!("need at least 2 channels, got {n}"));
    }
    let total = pair_count(n);
    if p >= total {
        return Err(invalid_arg!("pair index {p} out of range for {n} channels ({total} pairs)"));
    }
    let (p64, n64) = (p as u64, n as u64);
    let b = 2 * n64 - 1;
    let disc = b * b - 8 * p64;
    let mut i = (b - disc.isqrt()) / 2;
    while i + 1 < n64 && row_start(i + 1, n64) <= p64 {
        i += 1;
    }
    while row_start(i, n64) > p64 {
        i -= 1;
    }
    let j = i + 1 + p64 - row_start(i, n64);
    Ok((i as usize, j as usize))
}

/// Inverse of [`pair_from_index`]: `p = i(2n - i - 1)/2 + (j - i - 1)`.
pub fn index_from_pair(i: usize, j: usize, n: usize) -> Result<usize> {
    if i >= j || j >= n {
        return Err(invalid_arg!("pair ({i}, {j}) invalid for {n} channels; need i < j < n"));
    }
    Ok(i * (2 * n - i - 1) / 2 + (j - i - 1))
}

/// The pair space of `n` candidate channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairMap {
    n: usize,
}

impl PairMap {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid_arg!("need at least 2 channels, got {n}"));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> usize {
        pair_count(self.n)
    }

    pub fn pair(&self, p: usize) -> Result<(usize, usize)> {
        pair_from_index(p, self.n)
    }

    pub fn index(&self, i: usize, j: usize) -> Result<usize> {
        index_from_pair(i, j, self.n)
    }

    /// All pairs in index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n;
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
    }
}

/// Pairs handled by one logical worker block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub block_id: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Pairs visited by block `id` of `c` under the parity-balanced rule.
///
/// Block `id` takes `(it, id)` for every `it < id` at even distance and
/// `(id, it)` for every `it > id` at odd distance. Parity is taken on the
/// non-negative difference.
pub fn parity_block(id: usize, c: usize) -> Vec<(usize, usize)> {
    (0..c)
        .filter_map(|it| {
            if it < id && (id - it).is_multiple_of(2) {
                Some((it, id))
            } else if it > id && (it - id) % 2 == 1 {
                Some((id, it))
            } else {
                None
            }
        })
        .collect()
}

/// One block per channel; every pair lands in exactly one block and block
/// sizes differ by at most one.
pub fn parity_blocks(c: usize) -> Result<Vec<BlockAssignment>> {
    if c < 2 {
        return Err(invalid_arg!("parity blocks need at least 2 channels, got {c}"));
    }
    Ok((0..c).map(|id| BlockAssignment { block_id: id, pairs: parity_block(id, c) }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enumerate(n: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                v.push((i, j));
            }
        }
        v
    }

    #[test]
    fn small_cases_match_enumeration() {
        assert_eq!(pair_from_index(0, 4).unwrap(), (0, 1));
        assert_eq!(pair_from_index(5, 4).unwrap(), (2, 3));
        assert_eq!(index_from_pair(0, 1, 4).unwrap(), 0);
        assert_eq!(index_from_pair(2, 3, 4).unwrap(), 5);
        for n in 2..40 {
            for (p, &pair) in enumerate(n).iter().enumerate() {
                assert_eq!(pair_from_index(p, n).unwrap(), pair, "n={n} p={p}");
            }
            assert_eq!(pair_from_index(pair_count(n) - 1, n).unwrap(), (n - 2, n - 1));
        }
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(pair_from_index(6, 4).is_err());
        assert!(pair_from_index(0, 1).is_err());
        assert!(index_from_pair(2, 2, 4).is_err());
        assert!(index_from_pair(3, 2, 4).is_err());
        assert!(index_from_pair(1, 4, 4).is_err());
        assert!(parity_blocks(1).is_err());
    }

    #[test]
    fn row_boundaries_at_large_n() {
        // Rows where the discriminant is a perfect square are where a
        // floating point sqrt flips the floor.
        for n in [1 << 16, 1 << 20, 3_000_001] {
            for i in [0usize, 1, 2, n / 3, n / 2, n - 3, n - 2] {
                let start = index_from_pair(i, i + 1, n).unwrap();
                assert_eq!(pair_from_index(start, n).unwrap(), (i, i + 1));
                if start > 0 {
                    let (pi, pj) = pair_from_index(start - 1, n).unwrap();
                    assert_eq!((pi, pj), (i - 1, n - 1));
                }
            }
        }
    }

    #[test]
    fn parity_example_c4() {
        let blocks = parity_blocks(4).unwrap();
        let mut all: Vec<_> = blocks.iter().flat_map(|b| b.pairs.clone()).collect();
        all.sort();
        assert_eq!(all, enumerate(4));
        let sizes: Vec<_> = blocks.iter().map(|b| b.pairs.len()).collect();
        assert_eq!(sizes, vec![2, 1, 2, 1]);
        let two = parity_blocks(2).unwrap();
        assert_eq!(two.iter().map(|b| b.pairs.len()).sum::<usize>(), 1);
    }

    #[test]
    fn signed_modulo_reading_loses_pairs() {
        // Reading `(id - it) mod 2` with a truncating signed remainder makes
        // the odd branch test -1 == 1, which never holds.
        let c = 6;
        let signed: usize = (0..c)
            .map(|id| {
                (0..c)
                    .filter(|&it| {
                        let d = id as i64 - it as i64;
                        (it < id && d % 2 == 0) || (it > id && d % 2 == 1)
                    })
                    .count()
            })
            .sum();
        assert!(signed < pair_count(c));
    }

    proptest! {
        #[test]
        fn round_trip(n in 2usize..5000, frac in 0.0f64..1.0) {
            let p = ((pair_count(n) as f64 * frac) as usize).min(pair_count(n) - 1);
            let (i, j) = pair_from_index(p, n).unwrap();
            prop_assert!(i < j && j < n);
            prop_assert_eq!(index_from_pair(i, j, n).unwrap(), p);
        }
    }
}
