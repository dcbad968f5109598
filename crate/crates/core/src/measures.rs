//! Probability vectors, logits, and the four confidence measures.
//!
//! Every measure maps a point of the probability simplex to `[0, 1]`, with
//! `1` at the vertices (one-hot predictions) and the minimum at the uniform
//! vector:
//!
//! | measure   | score                                   |
//! |-----------|-----------------------------------------|
//! | `max`     | `v(1)`                                  |
//! | `margin2` | `v(1) - v(2)`                           |
//! | `margin3` | `v(1) - (v(2) + v(3)) / 2`              |
//! | `entropy` | `1 - H(v) / ln k`                       |
//!
//! where `v(i)` is the i-th largest entry. For `k = 2` the missing third entry
//! of `margin3` is taken as zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|sum(v) - 1|` for a valid probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// A point on the probability simplex over `k >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        validate_probs(&entries, PROB_SUM_TOLERANCE)?;
        Ok(ProbVector(entries))
    }

    /// Uniform vector over `k` classes.
    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {k}")));
        }
        Ok(ProbVector(vec![1.0 / k as f64; k]))
    }

    /// One-hot vector with mass on `class`.
    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if k < 2 || class >= k {
            return Err(Error::Validation(format!(
                "cannot build one-hot vector for class {class} of {k}"
            )));
        }
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Ok(ProbVector(v))
    }

    #[cfg(test)]
    pub(crate) fn from_unchecked(entries: Vec<f64>) -> Self {
        ProbVector(entries)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Entries sorted in descending order (stable).
    pub fn sorted_desc(&self) -> Vec<f64> {
        let mut s = self.0.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Predicted class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn validate_probs(entries: &[f64], sum_tolerance: f64) -> Result<()> {
    if entries.len() < 2 {
        return Err(Error::Validation(format!(
            "probability vector needs at least 2 entries, got {}",
            entries.len()
        )));
    }
    if let Some((i, p)) = entries
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::Validation(format!(
            "probability entry {i} = {p} outside [0, 1]"
        )));
    }
    let sum: f64 = entries.iter().sum();
    if (sum - 1.0).abs() > sum_tolerance {
        return Err(Error::Validation(format!(
            "probabilities sum to {sum}, expected 1 (tolerance {sum_tolerance})"
        )));
    }
    Ok(())
}

/// A pre-softmax score vector over `k >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::Validation(format!(
                "logit vector needs at least 2 entries, got {}",
                entries.len()
            )));
        }
        if let Some((i, z)) = entries.iter().enumerate().find(|(_, z)| !z.is_finite()) {
            return Err(Error::Validation(format!("logit entry {i} = {z} is not finite")));
        }
        Ok(LogitVector(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMeasure {
    Max,
    Margin2,
    Margin3,
    Entropy,
}

impl ConfidenceMeasure {
    pub const ALL: [ConfidenceMeasure; 4] = [
        ConfidenceMeasure::Max,
        ConfidenceMeasure::Margin2,
        ConfidenceMeasure::Margin3,
        ConfidenceMeasure::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceMeasure::Max => "max",
            ConfidenceMeasure::Margin2 => "margin2",
            ConfidenceMeasure::Margin3 => "margin3",
            ConfidenceMeasure::Entropy => "entropy",
        }
    }

    /// Score a validated probability vector.
    pub fn score(self, v: &ProbVector) -> f64 {
        self.score_slice(v.as_slice())
    }

    /// Score a raw slice that the caller knows to be a valid probability vector.
    pub(crate) fn score_slice(self, v: &[f64]) -> f64 {
        match self {
            ConfidenceMeasure::Max => top3(v).0,
            ConfidenceMeasure::Margin2 => {
                let (a, b, _) = top3(v);
                (a - b).max(0.0)
            }
            ConfidenceMeasure::Margin3 => {
                let (a, b, c) = top3(v);
                (a - (0.5 * b + 0.5 * c)).clamp(0.0, 1.0)
            }
            ConfidenceMeasure::Entropy => {
                (1.0 - entropy(v) / (v.len() as f64).ln()).clamp(0.0, 1.0)
            }
        }
    }
}

impl fmt::Display for ConfidenceMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfidenceMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(ConfidenceMeasure::Max),
            "margin2" => Ok(ConfidenceMeasure::Margin2),
            "margin3" => Ok(ConfidenceMeasure::Margin3),
            "entropy" => Ok(ConfidenceMeasure::Entropy),
            other => Err(Error::Config(format!("unknown confidence measure `{other}`"))),
        }
    }
}

/// Three largest entries in descending order; absent entries are zero.
fn top3(v: &[f64]) -> (f64, f64, f64) {
    let (mut a, mut b, mut c) = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in v {
        if x > a {
            c = b;
            b = a;
            a = x;
        } else if x > b {
            c = b;
            b = x;
        } else if x > c {
            c = x;
        }
    }
    let fix = |x: f64| if x == f64::NEG_INFINITY { 0.0 } else { x };
    (fix(a), fix(b), fix(c))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(v: &[f64]) -> f64 {
    -v.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Entropy divided by `ln k`, in `[0, 1]`.
pub fn normalized_entropy(v: &ProbVector) -> f64 {
    (entropy(v.as_slice()) / (v.k() as f64).ln()).clamp(0.0, 1.0)
}

pub fn confidence_max(v: &ProbVector) -> f64 {
    ConfidenceMeasure::Max.score(v)
}

pub fn confidence_margin2(v: &ProbVector) -> f64 {
    ConfidenceMeasure::Margin2.score(v)
}

pub fn confidence_margin3(v: &ProbVector) -> f64 {
    ConfidenceMeasure::Margin3.score(v)
}

pub fn confidence_entropy(v: &ProbVector) -> f64 {
    ConfidenceMeasure::Entropy.score(v)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Writes `softmax(z / t)` into `out`. Caller guarantees `t > 0` and finite `z`.
pub(crate) fn softmax_into(z: &[f64], t: f64, out: &mut [f64]) {
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &zi) in out.iter_mut().zip(z) {
        *o = ((zi - zmax) / t).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log softmax(z / t)[class]`, computed with log-sum-exp.
pub(crate) fn log_softmax_at(z: &[f64], t: f64, class: usize) -> f64 {
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = z.iter().map(|&zi| ((zi - zmax) / t).exp()).sum::<f64>().ln();
    (z[class] - zmax) / t - lse
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!(
            "temperature must be a positive finite number, got {t}"
        )));
    }
    Ok(())
}

/// Tempered softmax `sigma(z / t)`; `t = 1` is the plain softmax and large `t`
/// approaches the uniform vector.
pub fn softmax_temperature(z: &LogitVector, t: f64) -> Result<ProbVector> {
    check_temperature(t)?;
    let mut out = vec![0.0; z.k()];
    softmax_into(z.as_slice(), t, &mut out);
    Ok(ProbVector(out))
}

/// Entrywise `ln(max(v_i, epsilon))`, so that `softmax_temperature(_, 1)`
/// reproduces `v` whenever no entry was clamped.
pub fn probs_to_logits(v: &ProbVector, epsilon: f64) -> Result<LogitVector> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(LogitVector(
        v.as_slice().iter().map(|&p| p.max(epsilon).ln()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn max_tie_pair() -> (ProbVector, ProbVector) {
        let mut x1 = vec![0.0; 10];
        x1[0] = 0.9;
        x1[1] = 0.1;
        let mut x2 = vec![0.1 / 9.0; 10];
        x2[0] = 0.9;
        (pv(&x1), pv(&x2))
    }

    #[test]
    fn max_examples() {
        let (x1, _) = max_tie_pair();
        assert_eq!(confidence_max(&x1), 0.9);
        assert_abs_diff_eq!(confidence_max(&ProbVector::uniform(5).unwrap()), 0.2);
        assert_eq!(confidence_max(&ProbVector::one_hot(4, 2).unwrap()), 1.0);
    }

    #[test]
    fn margin2_examples() {
        let (x1, _) = max_tie_pair();
        assert_abs_diff_eq!(confidence_margin2(&x1), 0.8, epsilon = 1e-12);
        for k in 2..12 {
            assert_abs_diff_eq!(confidence_margin2(&ProbVector::uniform(k).unwrap()), 0.0);
        }
        assert_abs_diff_eq!(confidence_margin2(&pv(&[0.5, 0.3, 0.2])), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn margin3_examples() {
        let (x1, _) = max_tie_pair();
        assert_abs_diff_eq!(confidence_margin3(&x1), 0.85, epsilon = 1e-12);
        assert_abs_diff_eq!(confidence_margin3(&ProbVector::uniform(3).unwrap()), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(confidence_margin3(&pv(&[0.5, 0.3, 0.2])), 0.25, epsilon = 1e-12);
        // k = 2: third entry is zero.
        assert_abs_diff_eq!(confidence_margin3(&pv(&[0.8, 0.2])), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(confidence_entropy(&ProbVector::one_hot(3, 0).unwrap()), 1.0);
        assert_abs_diff_eq!(confidence_entropy(&ProbVector::uniform(7).unwrap()), 0.0, epsilon = 1e-15);
        // Values computed independently with numpy: 1 - H(v) / ln 10.
        let (x1, x2) = max_tie_pair();
        assert_abs_diff_eq!(confidence_entropy(&x1), 0.858_818_258_5, epsilon = 1e-9);
        assert_abs_diff_eq!(confidence_entropy(&x2), 0.763_394_007_6, epsilon = 1e-9);
        assert!(confidence_entropy(&x1) > confidence_entropy(&x2));
    }

    #[test]
    fn softmax_examples() {
        let z = LogitVector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_temperature(&z, 1.0).unwrap().as_slice(), &[0.5, 0.5]);

        let z = LogitVector::new(vec![2f64.ln(), 0.0]).unwrap();
        let p = softmax_temperature(&z, 0.5).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(p.as_slice()[1], 0.2, epsilon = 1e-12);

        let z = LogitVector::new(vec![3.0, 0.0, 0.0]).unwrap();
        let p = softmax_temperature(&z, 1000.0).unwrap();
        for &x in p.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = LogitVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(softmax_temperature(&z, 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_temperature(&z, -1.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_temperature(&z, f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let z = LogitVector::new(vec![1000.0, 999.0, -1000.0]).unwrap();
        let p = softmax_temperature(&z, 1.0).unwrap();
        assert!(p.as_slice().iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p.as_slice()[0], 1.0 / (1.0 + (-1f64).exp()), epsilon = 1e-12);
    }

    #[test]
    fn logit_recovery_round_trips() {
        let back = |v: &[f64], eps: f64| {
            let l = probs_to_logits(&pv(v), eps).unwrap();
            softmax_temperature(&l, 1.0).unwrap().into_inner()
        };
        let r = back(&[0.5, 0.5], 1e-12);
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-15);
        let l = probs_to_logits(&pv(&[0.5, 0.5]), 1e-12).unwrap();
        assert_eq!(l.as_slice(), &[0.5f64.ln(), 0.5f64.ln()]);

        let r = back(&[0.0, 1.0, 0.0], 1e-12);
        for (a, b) in r.iter().zip([0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        let r = back(&[0.7, 0.2, 0.1], 1e-12);
        for (a, b) in r.iter().zip([0.7, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_errors() {
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVector::new(vec![0.5, f64::NAN]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5 + 5e-7]).is_ok());
        assert!(LogitVector::new(vec![0.0, f64::INFINITY]).is_err());
        assert!(LogitVector::new(vec![0.0]).is_err());
        assert!("kurtosis".parse::<ConfidenceMeasure>().is_err());
    }

    #[test]
    fn measure_names_round_trip() {
        for m in ConfidenceMeasure::ALL {
            assert_eq!(m.name().parse::<ConfidenceMeasure>().unwrap(), m);
        }
    }

    fn simplex(k: std::ops::Range<usize>) -> impl Strategy<Value = ProbVector> {
        k.prop_flat_map(|k| prop::collection::vec(0.0f64..1.0, k)).prop_filter_map(
            "degenerate",
            |w| {
                let s: f64 = w.iter().sum();
                (s > 1e-9).then(|| ProbVector::from_unchecked(w.iter().map(|x| x / s).collect()))
            },
        )
    }

    proptest! {
        #[test]
        fn measures_stay_in_unit_interval(v in simplex(2..12)) {
            for m in ConfidenceMeasure::ALL {
                let s = m.score(&v);
                prop_assert!((0.0..=1.0).contains(&s), "{m} gave {s}");
            }
        }

        #[test]
        fn measures_are_permutation_invariant(v in simplex(2..10), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = v.as_slice().to_vec();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let w = ProbVector::from_unchecked(shuffled);
            // Entropy sums in a different order, so allow for rounding.
            for m in ConfidenceMeasure::ALL {
                prop_assert!((m.score(&v) - m.score(&w)).abs() <= 1e-12);
            }
        }

        #[test]
        fn uniform_is_the_minimum(v in simplex(2..10)) {
            let u = ProbVector::uniform(v.k()).unwrap();
            for m in ConfidenceMeasure::ALL {
                prop_assert!(m.score(&u) <= m.score(&v) + 1e-12);
            }
            prop_assert!((confidence_max(&u) - 1.0 / v.k() as f64).abs() <= 1e-15);
        }

        #[test]
        fn one_hot_scores_one(k in 2usize..12, c in 0usize..12) {
            let v = ProbVector::one_hot(k, c % k).unwrap();
            for m in ConfidenceMeasure::ALL {
                prop_assert_eq!(m.score(&v), 1.0);
            }
        }

        #[test]
        fn softmax_preserves_argmax_and_validity(
            z in prop::collection::vec(-30.0f64..30.0, 2..8),
            t in 0.01f64..100.0,
        ) {
            let zv = LogitVector::new(z.clone()).unwrap();
            let p = softmax_temperature(&zv, t).unwrap();
            prop_assert!(validate_probs(p.as_slice(), PROB_SUM_TOLERANCE).is_ok());
            let mut sorted = z.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(p.argmax(), argmax(&z));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(
            z in prop::collection::vec(-30.0f64..30.0, 2..8),
            shift in -100.0f64..100.0,
            t in 0.1f64..10.0,
        ) {
            let a = softmax_temperature(&LogitVector::new(z.clone()).unwrap(), t).unwrap();
            let shifted: Vec<f64> = z.iter().map(|x| x + shift).collect();
            let b = softmax_temperature(&LogitVector::new(shifted).unwrap(), t).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
