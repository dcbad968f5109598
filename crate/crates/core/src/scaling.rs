//! Temperature fitting.
//!
//! Two objectives share one search: the mean negative log-likelihood of the
//! true label (classic temperature scaling) and the binned calibration error
//! of a chosen confidence measure. The search evaluates a log-spaced grid
//! that always contains `T = 1` when it lies in range, then polishes the best
//! grid point with golden-section search between its grid neighbours. The
//! refined point replaces the grid winner only if it is strictly better, so
//! the returned objective never exceeds the value at any grid point.
//!
//! Adaptive bins are rebuilt at every candidate temperature.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::binning::{BinningConfig, DEFAULT_BINS};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::measures::{check_temperature, log_softmax_at, ConfidenceMeasure, LogitVector};
use crate::metrics::{calibration_error, missing_logits, Norm, Scored, Weighting};
use crate::par::*;

const GOLDEN_ITERATIONS: usize = 40;

/// Log-spaced search grid over `[t_min, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrid {
    pub t_min: f64,
    pub t_max: f64,
    pub steps: usize,
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        TemperatureGrid {
            t_min: 0.05,
            t_max: 5.0,
            steps: 200,
        }
    }
}

impl TemperatureGrid {
    pub fn new(t_min: f64, t_max: f64, steps: usize) -> Result<Self> {
        let g = TemperatureGrid { t_min, t_max, steps };
        g.validate()?;
        Ok(g)
    }

    /// A grid holding the single temperature `t`.
    pub fn single(t: f64) -> Result<Self> {
        Self::new(t, t, 1)
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.t_min)?;
        check_temperature(self.t_max)?;
        if self.t_max < self.t_min {
            return Err(Error::Config(format!(
                "t_max {} is below t_min {}",
                self.t_max, self.t_min
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("temperature grid needs at least one step".into()));
        }
        Ok(())
    }

    /// Sorted, de-duplicated grid points, including `1.0` when in range.
    pub fn points(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = if self.steps == 1 || self.t_min == self.t_max {
            vec![self.t_min]
        } else {
            let (lo, hi) = (self.t_min.ln(), self.t_max.ln());
            let last = (self.steps - 1) as f64;
            (0..self.steps)
                .map(|i| match i {
                    0 => self.t_min,
                    i if i == self.steps - 1 => self.t_max,
                    i => (lo + (hi - lo) * i as f64 / last).exp(),
                })
                .collect()
        };
        if (self.t_min..=self.t_max).contains(&1.0) {
            pts.push(1.0);
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Nll,
    CalibrationError,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Nll => "nll",
            Objective::CalibrationError => "calibration_error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub objective_value: f64,
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<ConfidenceMeasure>,
    pub grid: TemperatureGrid,
}

/// Settings for the calibration-error objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationObjective {
    pub binning: BinningConfig,
    pub norm: Norm,
}

impl Default for CalibrationObjective {
    fn default() -> Self {
        CalibrationObjective {
            binning: BinningConfig::adaptive(DEFAULT_BINS),
            norm: Norm::L1,
        }
    }
}

impl CalibrationObjective {
    /// Calibration error of `measure` applied to `softmax(z / t)`.
    pub fn evaluate(&self, dataset: &Dataset, measure: ConfidenceMeasure, t: f64) -> Result<f64> {
        let scored = Scored::from_logits_at(dataset, measure, t)?;
        let binning = scored.binning(&self.binning)?;
        let stats = scored.bin_stats(&binning);
        calibration_error(&stats, self.norm, Weighting::for_strategy(self.binning.strategy))
    }
}

/// Mean negative log-likelihood of the labels under `softmax(z / t)`.
pub fn mean_nll(dataset: &Dataset, t: f64) -> Result<f64> {
    dataset.ensure_non_empty()?;
    check_temperature(t)?;
    if !dataset.has_logits() {
        return Err(missing_logits());
    }
    let partials: Vec<f64> = dataset
        .records()
        .par_chunks(crate::par::CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|r| -log_softmax_at(r.logits.as_ref().unwrap().as_slice(), t, r.label))
                .sum::<f64>()
        })
        .collect();
    Ok(partials.iter().sum::<f64>() / dataset.len() as f64)
}

fn check_fit_input(dataset: &Dataset, grid: &TemperatureGrid) -> Result<()> {
    grid.validate()?;
    dataset.ensure_non_empty()?;
    if !dataset.has_logits() {
        return Err(missing_logits());
    }
    Ok(())
}

/// Grid search followed by golden-section refinement around the best point.
fn minimize<F>(grid: &TemperatureGrid, objective: F) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let points = grid.points();
    let values: Vec<f64> = points
        .par_iter()
        .map(|&t| objective(t))
        .collect::<Result<Vec<_>>>()?;

    // First minimum in ascending T order, so ties go to the smaller temperature.
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let (mut t_best, mut f_best) = (points[best], values[best]);
    if points.len() < 2 {
        return Ok((t_best, f_best));
    }

    let mut a = points[best.saturating_sub(1)];
    let mut b = points[(best + 1).min(points.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = objective(x1)?;
    let mut f2 = objective(x2)?;
    for _ in 0..GOLDEN_ITERATIONS {
        for (x, f) in [(x1, f1), (x2, f2)] {
            if f < f_best || (f == f_best && x < t_best) {
                t_best = x;
                f_best = f;
            }
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = objective(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = objective(x2)?;
        }
    }
    for (x, f) in [(x1, f1), (x2, f2)] {
        if f < f_best || (f == f_best && x < t_best) {
            t_best = x;
            f_best = f;
        }
    }
    Ok((t_best, f_best))
}

/// Classic temperature scaling: minimize the mean NLL of the labels.
pub fn fit_nll(validation: &Dataset, grid: &TemperatureGrid) -> Result<TemperatureFit> {
    check_fit_input(validation, grid)?;
    let (temperature, objective_value) = minimize(grid, |t| mean_nll(validation, t))?;
    Ok(TemperatureFit {
        temperature,
        objective_value,
        objective: Objective::Nll,
        measure: None,
        grid: *grid,
    })
}

/// Generalized temperature scaling: minimize the calibration error of `measure`.
pub fn fit_for_measure(
    validation: &Dataset,
    measure: ConfidenceMeasure,
    objective: &CalibrationObjective,
    grid: &TemperatureGrid,
) -> Result<TemperatureFit> {
    check_fit_input(validation, grid)?;
    let (temperature, objective_value) =
        minimize(grid, |t| objective.evaluate(validation, measure, t))?;
    Ok(TemperatureFit {
        temperature,
        objective_value,
        objective: Objective::CalibrationError,
        measure: Some(measure),
        grid: *grid,
    })
}

/// Replace every record's probabilities with `softmax(z / t)`.
pub fn apply_temperature(dataset: &Dataset, t: f64) -> Result<Dataset> {
    check_temperature(t)?;
    if !dataset.has_logits() {
        return Err(missing_logits());
    }
    let records = dataset
        .records()
        .par_iter()
        .map(|r| {
            let z: &LogitVector = r.logits.as_ref().unwrap();
            let mut out = r.clone();
            out.probs = crate::measures::softmax_temperature(z, t)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scaled = Dataset::new(records)?;
    scaled.metadata = dataset.metadata.clone();
    Ok(scaled)
}
