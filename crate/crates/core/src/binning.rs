//! Partitions of the confidence interval `[0, 1]`.
//!
//! Bins are right-closed: a score `s` falls in bin `b` iff
//! `edges[b] < s <= edges[b + 1]`, except that the first bin also contains
//! `0`. The same rule applies to fixed and adaptive binnings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinStrategy {
    /// Equal-width bins.
    Fixed,
    /// Equal-mass bins built from the observed scores.
    Adaptive,
}

impl fmt::Display for BinStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinStrategy::Fixed => "fixed",
            BinStrategy::Adaptive => "adaptive",
        })
    }
}

impl FromStr for BinStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(BinStrategy::Fixed),
            "adaptive" => Ok(BinStrategy::Adaptive),
            other => Err(Error::Config(format!("unknown binning strategy `{other}`"))),
        }
    }
}

/// How to bin: a strategy plus the target bin count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub strategy: BinStrategy,
    pub n: usize,
}

impl BinningConfig {
    pub fn fixed(n: usize) -> Self {
        BinningConfig {
            strategy: BinStrategy::Fixed,
            n,
        }
    }

    pub fn adaptive(n: usize) -> Self {
        BinningConfig {
            strategy: BinStrategy::Adaptive,
            n,
        }
    }

    /// Build the binning for a set of scores. Fixed binnings ignore the scores.
    pub fn build(&self, scores: &[f64]) -> Result<Binning> {
        match self.strategy {
            BinStrategy::Fixed => Binning::fixed(self.n),
            BinStrategy::Adaptive => Binning::adaptive(scores, self.n),
        }
    }
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig::adaptive(DEFAULT_BINS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    edges: Vec<f64>,
    strategy: BinStrategy,
    n: usize,
}

impl Binning {
    /// `n` equal-width bins with edges at `i / n`.
    pub fn fixed(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("bin count must be at least 1".into()));
        }
        let edges = (0..=n).map(|i| i as f64 / n as f64).collect();
        Ok(Binning {
            edges,
            strategy: BinStrategy::Fixed,
            n,
        })
    }

    /// Equal-mass bins over `scores`.
    ///
    /// The sorted scores are cut into `min(n, len)` contiguous groups whose
    /// sizes differ by at most one, larger groups first. The edge between two
    /// groups is the midpoint of the scores straddling the cut. A cut between
    /// two equal scores is dropped, merging the groups, so the result may
    /// have fewer than `n` bins.
    pub fn adaptive(scores: &[f64], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("bin count must be at least 1".into()));
        }
        if scores.is_empty() {
            return Err(Error::Domain("adaptive binning needs at least one score".into()));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Domain(format!("score {s} outside [0, 1]")));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        Ok(Self::adaptive_sorted(&sorted, n))
    }

    /// `sorted` must be ascending, non-empty, within `[0, 1]`.
    pub(crate) fn adaptive_sorted(sorted: &[f64], n: usize) -> Self {
        let m = sorted.len();
        let groups = n.min(m);
        let base = m / groups;
        let extra = m % groups;

        let mut edges = Vec::with_capacity(groups + 1);
        edges.push(0.0);
        let mut cut = 0;
        for g in 0..groups - 1 {
            cut += base + usize::from(g < extra);
            let (lo, hi) = (sorted[cut - 1], sorted[cut]);
            if lo == hi {
                continue;
            }
            let mut mid = lo + (hi - lo) / 2.0;
            if mid >= hi {
                mid = lo;
            }
            if mid > *edges.last().unwrap() && mid < 1.0 {
                edges.push(mid);
            }
        }
        edges.push(1.0);
        Binning {
            edges,
            strategy: BinStrategy::Adaptive,
            n,
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn strategy(&self) -> BinStrategy {
        self.strategy
    }

    /// Requested bin count; `num_bins()` may be smaller after merging.
    pub fn target_bins(&self) -> usize {
        self.n
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin index of `score`, or a domain error when it lies outside `[0, 1]`.
    pub fn assign(&self, score: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Domain(format!("score {score} outside [0, 1]")));
        }
        Ok(self.index_of(score))
    }

    /// Unchecked lookup for scores already known to lie in `[0, 1]`.
    pub(crate) fn index_of(&self, score: f64) -> usize {
        let inner = &self.edges[1..self.edges.len() - 1];
        inner.partition_point(|&e| e < score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_edges() {
        assert_eq!(Binning::fixed(2).unwrap().edges(), &[0.0, 0.5, 1.0]);
        assert_eq!(Binning::fixed(1).unwrap().edges(), &[0.0, 1.0]);
        assert_eq!(
            Binning::fixed(4).unwrap().edges(),
            &[0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert!(matches!(Binning::fixed(0), Err(Error::Domain(_))));
    }

    #[test]
    fn adaptive_examples() {
        let b = Binning::adaptive(&[0.1, 0.2, 0.3, 0.4], 2).unwrap();
        assert_eq!(b.edges().len(), 3);
        assert!((b.edges()[1] - 0.25).abs() < 1e-15);

        let b = Binning::adaptive(&[0.9, 0.1, 0.5], 1).unwrap();
        assert_eq!(b.edges(), &[0.0, 1.0]);

        let b = Binning::adaptive(&[0.7; 9], 3).unwrap();
        assert_eq!(b.edges(), &[0.0, 1.0]);
        assert_eq!(b.target_bins(), 3);

        assert!(matches!(Binning::adaptive(&[], 3), Err(Error::Domain(_))));
        assert!(matches!(Binning::adaptive(&[0.5], 0), Err(Error::Domain(_))));
        assert!(matches!(Binning::adaptive(&[1.5], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn adaptive_with_more_bins_than_scores() {
        let b = Binning::adaptive(&[0.2, 0.8], 15).unwrap();
        assert_eq!(b.num_bins(), 2);
        assert_eq!(b.edges(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn adaptive_merges_partial_ties() {
        // Groups {0.1, 0.5} {0.5, 0.5} {0.5, 0.9}: both cuts fall inside the run of 0.5s.
        let b = Binning::adaptive(&[0.1, 0.5, 0.5, 0.5, 0.5, 0.9], 3).unwrap();
        assert_eq!(b.edges(), &[0.0, 1.0]);
        let b = Binning::adaptive(&[0.1, 0.2, 0.5, 0.5, 0.5, 0.9], 3).unwrap();
        assert_eq!(b.num_bins(), 2);
        assert!((b.edges()[1] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn adaptive_handles_boundary_scores() {
        let b = Binning::adaptive(&[0.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(b.edges(), &[0.0, 0.5, 1.0]);
        assert_eq!(b.assign(0.0).unwrap(), 0);
        assert_eq!(b.assign(1.0).unwrap(), 1);
    }

    #[test]
    fn assign_examples() {
        let b = Binning::fixed(2).unwrap();
        assert_eq!(b.assign(0.5).unwrap(), 0);
        assert_eq!(b.assign(0.75).unwrap(), 1);
        assert_eq!(b.assign(0.0).unwrap(), 0);
        assert_eq!(b.assign(1.0).unwrap(), 1);
        let one = Binning::fixed(1).unwrap();
        for s in [0.0, 0.3, 1.0] {
            assert_eq!(one.assign(s).unwrap(), 0);
        }
        assert!(matches!(b.assign(1.0001), Err(Error::Domain(_))));
        assert!(matches!(b.assign(-0.1), Err(Error::Domain(_))));
        assert!(matches!(b.assign(f64::NAN), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn equal_mass_on_distinct_scores(per_bin in 1usize..20, n in 1usize..16, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = per_bin * n;
            let mut scores: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            scores.sort_by(f64::total_cmp);
            scores.dedup();
            prop_assume!(scores.len() == m);
            let b = Binning::adaptive(&scores, n).unwrap();
            prop_assert_eq!(b.num_bins(), n);
            let mut counts = vec![0usize; n];
            for &s in &scores {
                counts[b.assign(s).unwrap()] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c == per_bin), "{:?}", counts);
        }

        #[test]
        fn assign_matches_edges(scores in prop::collection::vec(0.0f64..=1.0, 1..200), n in 1usize..20) {
            for b in [Binning::adaptive(&scores, n).unwrap(), Binning::fixed(n).unwrap()] {
                let e = b.edges();
                prop_assert_eq!(e[0], 0.0);
                prop_assert_eq!(*e.last().unwrap(), 1.0);
                prop_assert!(e.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(b.num_bins() <= n);
                let mut total = 0;
                for &s in &scores {
                    let i = b.assign(s).unwrap();
                    let inside = (e[i] < s || (i == 0 && s == 0.0)) && s <= e[i + 1];
                    prop_assert!(inside);
                    total += 1;
                }
                prop_assert_eq!(total, scores.len());
            }
            prop_assert_eq!(Binning::adaptive(&scores, n).unwrap(), Binning::adaptive(&scores, n).unwrap());
        }
    }
}
