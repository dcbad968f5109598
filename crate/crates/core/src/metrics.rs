//! Binned calibration error, sharpness, and the squared-loss decomposition.
//!
//! For a confidence score `c` and correctness `r = 1 - err`, bin `b` holds
//! `count_b` samples with mean confidence `c_b` and mean correctness `r_b`.
//! With `w_b = count_b / N` and `r` the global accuracy:
//!
//! ```text
//! loss        = mean[(r_i - c_{b(i)})^2]
//! variance    = Var[r]
//! sharpness   = sum_b w_b (r_b - r)^2
//! calibration = sum_b w_b (r_b - c_b)^2
//! loss        = variance - sharpness + calibration
//! ```
//!
//! The identity is exact because each sample's confidence is replaced by its
//! bin mean, which kills the cross term.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binning::{BinStrategy, Binning, BinningConfig, DEFAULT_BINS};
use crate::dataio::{Dataset, PredictionRecord};
use crate::error::{Error, Result};
use crate::measures::{check_temperature, softmax_into, ConfidenceMeasure};
use crate::par::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

/// How bin residuals are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weight each bin by its share of samples (ECE convention).
    ByCount,
    /// Plain mean over occupied bins (ACE convention).
    Uniform,
}

impl Weighting {
    /// The conventional weighting for a binning strategy.
    pub fn for_strategy(strategy: BinStrategy) -> Self {
        match strategy {
            BinStrategy::Fixed => Weighting::ByCount,
            BinStrategy::Adaptive => Weighting::Uniform,
        }
    }
}

/// Correctness (`1 - err`) of a record: 1 if the argmax matches the label.
pub fn correctness(record: &PredictionRecord) -> Result<u8> {
    if record.label >= record.k() {
        return Err(Error::Validation(format!(
            "label {} out of range for {} classes",
            record.label,
            record.k()
        )));
    }
    Ok(u8::from(record.is_correct()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub confidence_sum: f64,
    pub correct: usize,
}

impl BinStat {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (self.count > 0).then(|| self.confidence_sum / self.count as f64)
    }

    pub fn mean_correctness(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }

    fn merge(&mut self, other: &BinStat) {
        self.count += other.count;
        self.confidence_sum += other.confidence_sum;
        self.correct += other.correct;
    }
}

/// Per-bin sufficient statistics for one confidence measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub edges: Vec<f64>,
    pub bins: Vec<BinStat>,
}

impl BinStats {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn total_correct(&self) -> usize {
        self.bins.iter().map(|b| b.correct).sum()
    }

    /// Occupied bins as `(weight, mean confidence, mean correctness)`.
    fn occupied(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let n = self.total() as f64;
        self.bins.iter().filter(|b| !b.is_empty()).map(move |b| {
            (
                b.count as f64 / n,
                b.mean_confidence().unwrap(),
                b.mean_correctness().unwrap(),
            )
        })
    }

    fn ensure_occupied(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Domain("no occupied bins".into()));
        }
        Ok(())
    }
}

/// Confidence scores paired with correctness, ready for binning.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
}

impl Scored {
    pub fn new(confidence: Vec<f64>, correct: Vec<bool>) -> Result<Self> {
        if confidence.len() != correct.len() {
            return Err(Error::Validation(format!(
                "{} confidences but {} correctness values",
                confidence.len(),
                correct.len()
            )));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Scored {
            confidence,
            correct,
        })
    }

    /// Score every record of `dataset` with `measure`.
    pub fn from_dataset(dataset: &Dataset, measure: ConfidenceMeasure) -> Result<Self> {
        dataset.ensure_non_empty()?;
        let pairs: Vec<(f64, bool)> = dataset
            .records()
            .par_iter()
            .map(|r| (measure.score(&r.probs), r.is_correct()))
            .collect();
        let (confidence, correct) = pairs.into_iter().unzip();
        Ok(Scored {
            confidence,
            correct,
        })
    }

    /// Score `softmax(z / t)` for every record. Records must carry logits.
    pub fn from_logits_at(dataset: &Dataset, measure: ConfidenceMeasure, t: f64) -> Result<Self> {
        dataset.ensure_non_empty()?;
        check_temperature(t)?;
        if !dataset.has_logits() {
            return Err(missing_logits());
        }
        let pairs: Vec<(f64, bool)> = dataset
            .records()
            .par_iter()
            .map(|r| {
                let z = r.logits.as_ref().unwrap().as_slice();
                let mut p = vec![0.0; z.len()];
                softmax_into(z, t, &mut p);
                (
                    measure.score_slice(&p),
                    crate::measures::argmax(&p) == r.label,
                )
            })
            .collect();
        let (confidence, correct) = pairs.into_iter().unzip();
        Ok(Scored {
            confidence,
            correct,
        })
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|&&c| c).count() as f64 / self.len() as f64
    }

    pub fn binning(&self, config: &BinningConfig) -> Result<Binning> {
        config.build(&self.confidence)
    }

    /// Accumulate per-bin statistics. Chunked so the result does not depend
    /// on how many threads run it.
    pub fn bin_stats(&self, binning: &Binning) -> BinStats {
        let nb = binning.num_bins();
        let partials: Vec<Vec<BinStat>> = self
            .confidence
            .par_chunks(crate::par::CHUNK)
            .zip(self.correct.par_chunks(crate::par::CHUNK))
            .map(|(conf, correct)| {
                let mut acc = vec![BinStat::default(); nb];
                for (&c, &ok) in conf.iter().zip(correct) {
                    let b = &mut acc[binning.index_of(c)];
                    b.count += 1;
                    b.confidence_sum += c;
                    b.correct += usize::from(ok);
                }
                acc
            })
            .collect();
        let mut bins = vec![BinStat::default(); nb];
        for part in &partials {
            for (b, p) in bins.iter_mut().zip(part) {
                b.merge(p);
            }
        }
        BinStats {
            edges: binning.edges().to_vec(),
            bins,
        }
    }

    pub fn decompose(&self, binning: &Binning) -> Result<DecompositionResult> {
        if self.is_empty() {
            return Err(Error::Validation("no samples to decompose".into()));
        }
        let stats = self.bin_stats(binning);
        let n = self.len() as f64;
        let loss_terms: Vec<f64> = self
            .confidence
            .par_chunks(crate::par::CHUNK)
            .zip(self.correct.par_chunks(crate::par::CHUNK))
            .map(|(conf, correct)| {
                conf.iter()
                    .zip(correct)
                    .map(|(&c, &ok)| {
                        let b = &stats.bins[binning.index_of(c)];
                        let r = if ok { 1.0 } else { 0.0 };
                        (r - b.mean_confidence().unwrap()).powi(2)
                    })
                    .sum::<f64>()
            })
            .collect();
        let l2_loss = loss_terms.iter().sum::<f64>() / n;
        let acc = stats.total_correct() as f64 / n;
        let calibration_l2 = stats
            .occupied()
            .map(|(w, c, r)| w * (r - c).powi(2))
            .sum();
        Ok(DecompositionResult {
            l2_loss,
            variance_term: acc * (1.0 - acc),
            sharpness: sharpness(&stats)?,
            calibration_l2,
        })
    }
}

pub(crate) fn missing_logits() -> Error {
    Error::Config(
        "temperature scaling needs logits on every record; enable logit recovery (--epsilon) for probability-only input"
            .into(),
    )
}

pub fn bin_stats(dataset: &Dataset, measure: ConfidenceMeasure, binning: &Binning) -> Result<BinStats> {
    Ok(Scored::from_dataset(dataset, measure)?.bin_stats(binning))
}

/// Calibration error over occupied bins.
///
/// `l1` averages `|r_b - c_b|`; `l2` takes the square root of the averaged
/// squared residual. `ByCount` with fixed bins is ECE, `Uniform` with
/// adaptive bins is ACE.
pub fn calibration_error(stats: &BinStats, norm: Norm, weighting: Weighting) -> Result<f64> {
    stats.ensure_occupied()?;
    let occupied = stats.bins.iter().filter(|b| !b.is_empty()).count() as f64;
    let mut total = 0.0;
    for (w, c, r) in stats.occupied() {
        let w = match weighting {
            Weighting::ByCount => w,
            Weighting::Uniform => 1.0 / occupied,
        };
        total += match norm {
            Norm::L1 => w * (r - c).abs(),
            Norm::L2 => w * (r - c).powi(2),
        };
    }
    Ok(match norm {
        Norm::L1 => total,
        Norm::L2 => total.sqrt(),
    })
}

/// Count-weighted variance of bin accuracy around the global accuracy.
pub fn sharpness(stats: &BinStats) -> Result<f64> {
    stats.ensure_occupied()?;
    let acc = stats.total_correct() as f64 / stats.total() as f64;
    Ok(stats.occupied().map(|(w, _, r)| w * (r - acc).powi(2)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    /// Mean squared gap between correctness and bin-mean confidence.
    pub l2_loss: f64,
    /// Variance of correctness; independent of the confidence measure.
    pub variance_term: f64,
    pub sharpness: f64,
    pub calibration_l2: f64,
}

impl DecompositionResult {
    /// `variance - sharpness + calibration`, which should equal `l2_loss`.
    pub fn reconstructed_loss(&self) -> f64 {
        self.variance_term - self.sharpness + self.calibration_l2
    }
}

pub fn decompose(
    dataset: &Dataset,
    measure: ConfidenceMeasure,
    binning: &Binning,
) -> Result<DecompositionResult> {
    Scored::from_dataset(dataset, measure)?.decompose(binning)
}

/// Bin count for ECE/ACE and the strategy used for sharpness and the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub bins: usize,
    pub strategy: BinStrategy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bins: DEFAULT_BINS,
            strategy: BinStrategy::Adaptive,
        }
    }
}

/// Metrics for one measure under one regime (out of the box or temperature-scaled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub temperature: f64,
    pub accuracy: f64,
    pub ece_l1: f64,
    pub ace_l1: f64,
    pub ece_l2: f64,
    pub ace_l2: f64,
    pub sharpness: f64,
    pub decomposition: DecompositionResult,
    pub fixed_edges: Vec<f64>,
    pub adaptive_edges: Vec<f64>,
}

impl RegimeMetrics {
    pub fn compute(scored: &Scored, temperature: f64, config: &EvalConfig) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::Validation("no samples to evaluate".into()));
        }
        let fixed = Binning::fixed(config.bins)?;
        let adaptive = Binning::adaptive(&scored.confidence, config.bins)?;
        let fixed_stats = scored.bin_stats(&fixed);
        let adaptive_stats = scored.bin_stats(&adaptive);
        let primary = match config.strategy {
            BinStrategy::Fixed => &fixed,
            BinStrategy::Adaptive => &adaptive,
        };
        let decomposition = scored.decompose(primary)?;
        Ok(RegimeMetrics {
            temperature,
            accuracy: scored.accuracy(),
            ece_l1: calibration_error(&fixed_stats, Norm::L1, Weighting::ByCount)?,
            ace_l1: calibration_error(&adaptive_stats, Norm::L1, Weighting::Uniform)?,
            ece_l2: calibration_error(&fixed_stats, Norm::L2, Weighting::ByCount)?,
            ace_l2: calibration_error(&adaptive_stats, Norm::L2, Weighting::Uniform)?,
            sharpness: decomposition.sharpness,
            decomposition,
            fixed_edges: fixed.edges().to_vec(),
            adaptive_edges: adaptive.edges().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub measure: ConfidenceMeasure,
    pub oob: RegimeMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<RegimeMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub config: EvalConfig,
    pub samples: usize,
    pub classes: usize,
    pub accuracy: f64,
    pub measures: Vec<MeasureReport>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl CalibrationReport {
    pub fn get(&self, measure: ConfidenceMeasure) -> Option<&MeasureReport> {
        self.measures.iter().find(|m| m.measure == measure)
    }
}

/// Evaluate each measure out of the box and, when a temperature is given for
/// it, after temperature scaling.
pub fn evaluate_all(
    dataset: &Dataset,
    config: &EvalConfig,
    measures: &[ConfidenceMeasure],
    temperatures: Option<&BTreeMap<ConfidenceMeasure, f64>>,
) -> Result<CalibrationReport> {
    dataset.ensure_non_empty()?;
    let mut out = Vec::with_capacity(measures.len());
    for &measure in measures {
        let oob = RegimeMetrics::compute(&Scored::from_dataset(dataset, measure)?, 1.0, config)?;
        let t = temperatures.and_then(|ts| ts.get(&measure).copied());
        let ts = t
            .map(|t| {
                let scored = Scored::from_logits_at(dataset, measure, t)?;
                RegimeMetrics::compute(&scored, t, config)
            })
            .transpose()?;
        out.push(MeasureReport {
            measure,
            oob,
            ts,
            fitted_temperature: t,
        });
    }
    Ok(CalibrationReport {
        config: *config,
        samples: dataset.len(),
        classes: dataset.k(),
        accuracy: dataset.accuracy()?,
        measures: out,
        metadata: dataset.metadata.clone(),
    })
}
