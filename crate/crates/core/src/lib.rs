//! Confidence measures for classifier predictions, with binned calibration
//! and sharpness estimators and a temperature-scaling variant that tunes the
//! temperature for any chosen measure.
//!
//! ```
//! use confcal::{ConfidenceMeasure, ProbVector};
//!
//! let v = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
//! assert_eq!(ConfidenceMeasure::Max.score(&v), 0.5);
//! assert!((ConfidenceMeasure::Margin3.score(&v) - 0.25).abs() < 1e-12);
//! ```
//!
//! The `parallel` feature (on by default) runs the per-sample and per-grid
//! point loops on rayon; without it the same code runs sequentially and
//! produces identical numbers.

pub mod binning;
pub mod cli;
pub mod dataio;
mod error;
pub mod measures;
pub mod metrics;
pub mod par;
pub mod scaling;
pub mod synth;

pub use binning::{BinStrategy, Binning, BinningConfig, DEFAULT_BINS};
pub use dataio::{read_dataset, write_dataset, Dataset, Format, PredictionRecord, ReadOptions};
pub use error::{Error, Result};
pub use measures::{
    confidence_entropy, confidence_margin2, confidence_margin3, confidence_max, probs_to_logits,
    softmax_temperature, ConfidenceMeasure, LogitVector, ProbVector,
};
pub use metrics::{
    bin_stats, calibration_error, correctness, decompose, evaluate_all, sharpness, BinStats,
    CalibrationReport, DecompositionResult, EvalConfig, Norm, Scored, Weighting,
};
pub use scaling::{
    apply_temperature, fit_for_measure, fit_nll, CalibrationObjective, TemperatureFit,
    TemperatureGrid,
};
pub use synth::{generate, SynthConfig, Synthetic};
