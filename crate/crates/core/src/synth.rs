//! Synthetic prediction streams with known ground truth.
//!
//! Each record draws a true conditional `q ~ Dirichlet(alpha * 1_k)` and a
//! label `y ~ Categorical(q)`, then emits logits `z = a * ln q`. With `a = 1`
//! the model is calibrated by construction; for any `a`, scaling the logits
//! by `T = a` restores `softmax(z / T) = q`.
//!
//! Record `i` uses its own ChaCha8 stream (`seed`, stream `i`), so output is
//! reproducible and independent of how generation is split across threads.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::dataio::{Dataset, PredictionRecord};
use crate::error::{Error, Result};
use crate::measures::{softmax_temperature, LogitVector};
use crate::par::*;

pub const RNG_NAME: &str = "chacha8-stream-per-record";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub distortion_a: f64,
    pub seed: u64,
    pub domain_count: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 10_000,
            k: 5,
            alpha: 1.0,
            distortion_a: 1.0,
            seed: 0,
            domain_count: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Domain("sample count n must be at least 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Domain(format!("class count k must be at least 2, got {}", self.k)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.distortion_a > 0.0 && self.distortion_a.is_finite()) {
            return Err(Error::Domain(format!(
                "distortion must be positive, got {}",
                self.distortion_a
            )));
        }
        if self.domain_count == Some(0) {
            return Err(Error::Domain("domain count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generated dataset plus the hidden true conditionals.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub truth: Vec<Vec<f64>>,
    pub distortion_a: f64,
}

#[derive(Serialize)]
struct TruthLine<'a> {
    q: &'a [f64],
    distortion_a: f64,
}

impl Synthetic {
    /// Sidecar ground truth: one JSON object `{"q": [...], "distortion_a": a}` per record.
    pub fn truth_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for q in &self.truth {
            let line = TruthLine {
                q,
                distortion_a: self.distortion_a,
            };
            serde_json::to_writer(&mut out, &line).expect("serializing to memory");
            out.push(b'\n');
        }
        out
    }
}

pub fn generate(config: &SynthConfig) -> Result<Synthetic> {
    config.validate()?;
    let gamma = Gamma::new(config.alpha, 1.0)
        .map_err(|e| Error::Domain(format!("alpha {}: {e}", config.alpha)))?;
    let rows = (0..config.n)
        .into_par_iter()
        .map(|i| draw(config, &gamma, i as u64))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(config.n);
    let mut truth = Vec::with_capacity(config.n);
    for (rec, q) in rows {
        records.push(rec);
        truth.push(q);
    }
    let dataset = Dataset::new(records)?
        .with_metadata("source", "synth")
        .with_metadata("rng", RNG_NAME)
        .with_metadata("seed", config.seed)
        .with_metadata("n", config.n)
        .with_metadata("k", config.k)
        .with_metadata("alpha", config.alpha)
        .with_metadata("distortion_a", config.distortion_a);
    Ok(Synthetic {
        dataset,
        truth,
        distortion_a: config.distortion_a,
    })
}

fn draw(config: &SynthConfig, gamma: &Gamma<f64>, index: u64) -> Result<(PredictionRecord, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);

    // Floor the gamma draws so that ln q stays finite for tiny alpha.
    let g: Vec<f64> = (0..config.k)
        .map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = g.iter().sum();
    let q: Vec<f64> = g.iter().map(|x| x / total).collect();

    let u: f64 = rng.random();
    let mut label = config.k - 1;
    let mut acc = 0.0;
    for (c, &p) in q.iter().enumerate() {
        acc += p;
        if u < acc {
            label = c;
            break;
        }
    }

    let logits = LogitVector::new(q.iter().map(|p| config.distortion_a * p.ln()).collect())?;
    let probs = softmax_temperature(&logits, 1.0)?;
    let mut rec = PredictionRecord::new(Some(logits), probs, label, None)?;
    if let Some(d) = config.domain_count {
        rec.domain = Some(format!("domain-{}", rng.random_range(0..d)));
    }
    Ok((rec, q))
}

/// Reference implementations written as direct loops, sharing no code with
/// the `measures`, `binning` or `metrics` modules. Used to cross-check them.
pub mod oracle {
    use crate::dataio::Dataset;
    use crate::error::{Error, Result};
    use crate::measures::ConfidenceMeasure;

    #[derive(Debug, Clone, PartialEq)]
    pub struct OracleBin {
        pub count: usize,
        pub mean_confidence: f64,
        pub mean_correctness: f64,
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct OracleMetrics {
        /// `None` for empty bins.
        pub bins: Vec<Option<OracleBin>>,
        pub ece_l1: f64,
        pub ace_l1: f64,
        pub ece_l2: f64,
        pub ace_l2: f64,
        pub sharpness: f64,
        pub l2_loss: f64,
        pub variance_term: f64,
        pub calibration_l2: f64,
    }

    /// Confidence straight from the definitions: full descending sort, explicit entropy sum.
    pub fn confidence(measure: ConfidenceMeasure, probs: &[f64]) -> f64 {
        let mut s = probs.to_vec();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let at = |i: usize| if i < s.len() { s[i] } else { 0.0 };
        let v = match measure {
            ConfidenceMeasure::Max => at(0),
            ConfidenceMeasure::Margin2 => at(0) - at(1),
            ConfidenceMeasure::Margin3 => at(0) - (0.5 * at(1) + 0.5 * at(2)),
            ConfidenceMeasure::Entropy => {
                let mut h = 0.0;
                for &p in probs {
                    if p > 0.0 {
                        h -= p * p.ln();
                    }
                }
                1.0 - h / (probs.len() as f64).ln()
            }
        };
        v.clamp(0.0, 1.0)
    }

    pub fn correct(probs: &[f64], label: usize) -> bool {
        let mut best = 0;
        for i in 0..probs.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        best == label
    }

    fn in_bin(edges: &[f64], b: usize, s: f64) -> bool {
        let lower_ok = if b == 0 { s >= edges[0] } else { s > edges[b] };
        lower_ok && s <= edges[b + 1]
    }

    /// Equal-mass edges written out directly from the group-size and midpoint rule.
    pub fn adaptive_edges(scores: &[f64], n: usize) -> Vec<f64> {
        let mut s = scores.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = s.len();
        let groups = if n < m { n } else { m };
        let mut sizes = vec![m / groups; groups];
        for size in sizes.iter_mut().take(m % groups) {
            *size += 1;
        }
        let mut edges = vec![0.0];
        let mut pos = 0;
        for size in &sizes[..groups - 1] {
            pos += size;
            let lo = s[pos - 1];
            let hi = s[pos];
            if lo != hi {
                let mut mid = lo + (hi - lo) / 2.0;
                if mid >= hi {
                    mid = lo;
                }
                if mid > edges[edges.len() - 1] && mid < 1.0 {
                    edges.push(mid);
                }
            }
        }
        edges.push(1.0);
        edges
    }

    /// Every metric from confidences, correctness and explicit edges, by double loop.
    pub fn metrics_from_scores(conf: &[f64], correct: &[bool], edges: &[f64]) -> Result<OracleMetrics> {
        let n = conf.len();
        if n == 0 {
            return Err(Error::Validation("no samples".into()));
        }
        let nb = edges.len() - 1;
        let mut bins = Vec::with_capacity(nb);
        for b in 0..nb {
            let mut count = 0usize;
            let mut csum = 0.0;
            let mut rsum = 0.0;
            for i in 0..n {
                if in_bin(edges, b, conf[i]) {
                    count += 1;
                    csum += conf[i];
                    rsum += if correct[i] { 1.0 } else { 0.0 };
                }
            }
            bins.push((count > 0).then(|| OracleBin {
                count,
                mean_confidence: csum / count as f64,
                mean_correctness: rsum / count as f64,
            }));
        }
        let total: usize = bins.iter().flatten().map(|b| b.count).sum();
        if total != n {
            return Err(Error::Domain("some scores fall outside every bin".into()));
        }

        let mut acc = 0.0;
        for &c in correct {
            if c {
                acc += 1.0;
            }
        }
        acc /= n as f64;

        let occupied = bins.iter().flatten().count() as f64;
        let (mut ece1, mut ace1, mut ece2, mut ace2, mut sharp, mut cal) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for b in bins.iter().flatten() {
            let w = b.count as f64 / n as f64;
            let gap = b.mean_correctness - b.mean_confidence;
            ece1 += w * gap.abs();
            ace1 += gap.abs() / occupied;
            ece2 += w * gap * gap;
            ace2 += gap * gap / occupied;
            sharp += w * (b.mean_correctness - acc) * (b.mean_correctness - acc);
            cal += w * gap * gap;
        }

        let mut loss = 0.0;
        let mut var = 0.0;
        for i in 0..n {
            let r = if correct[i] { 1.0 } else { 0.0 };
            let mut cbar = f64::NAN;
            for (b, bin) in bins.iter().enumerate() {
                if in_bin(edges, b, conf[i]) {
                    cbar = bin.as_ref().unwrap().mean_confidence;
                }
            }
            loss += (r - cbar) * (r - cbar);
            var += (r - acc) * (r - acc);
        }

        Ok(OracleMetrics {
            bins,
            ece_l1: ece1,
            ace_l1: ace1,
            ece_l2: ece2.sqrt(),
            ace_l2: ace2.sqrt(),
            sharpness: sharp,
            l2_loss: loss / n as f64,
            variance_term: var / n as f64,
            calibration_l2: cal,
        })
    }

    /// Oracle metrics for `measure` on `dataset` with the given bin edges.
    pub fn oracle_metrics(dataset: &Dataset, measure: ConfidenceMeasure, edges: &[f64]) -> Result<OracleMetrics> {
        let mut conf = Vec::new();
        let mut ok = Vec::new();
        for r in dataset.records() {
            conf.push(confidence(measure, r.probs.as_slice()));
            ok.push(correct(r.probs.as_slice(), r.label));
        }
        metrics_from_scores(&conf, &ok, edges)
    }
}
