//! Command implementations behind the `confcal` binary.
//!
//! Each command takes a plain struct of already-parsed options so it can be
//! driven from tests without going through argument parsing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::dataio::{read_dataset, write_atomic, write_dataset, Dataset, Format, ReadOptions};
use crate::measures::{ConfidenceMeasure, ProbVector};
use crate::metrics::{evaluate_all, CalibrationReport, EvalConfig, RegimeMetrics};
use crate::scaling::{fit_for_measure, fit_nll, CalibrationObjective, TemperatureFit, TemperatureGrid};
use crate::synth::{generate, SynthConfig};

/// Parse `--measure`: one measure name or `all`.
pub fn parse_measures(s: &str) -> Result<Vec<ConfidenceMeasure>> {
    if s == "all" {
        return Ok(ConfidenceMeasure::ALL.to_vec());
    }
    s.split(',')
        .map(|m| m.trim().parse::<ConfidenceMeasure>().with_context(|| "--measure"))
        .collect()
}

fn load(path: &Path, format: Option<Format>, opts: ReadOptions) -> Result<Dataset> {
    let format = format.unwrap_or_else(|| Format::from_path(path));
    let ds = read_dataset(path, format, opts)?;
    if ds.is_empty() {
        bail!("{}: validation error: dataset is empty", path.display());
    }
    Ok(ds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SynthCmd {
    pub config: SynthConfig,
    pub output: PathBuf,
    pub format: Option<Format>,
}

/// Where `synth` puts the ground-truth sidecar for a dataset path.
pub fn truth_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    output.with_file_name(format!("{stem}.truth.jsonl"))
}

pub fn cmd_synth(cmd: &SynthCmd) -> Result<PathBuf> {
    let synth = generate(&cmd.config).context("synth")?;
    let format = cmd.format.unwrap_or_else(|| Format::from_path(&cmd.output));
    write_dataset(&synth.dataset, &cmd.output, format)?;
    let sidecar = truth_path(&cmd.output);
    write_atomic(&sidecar, &synth.truth_jsonl())?;
    Ok(sidecar)
}

#[derive(Debug, Clone)]
pub struct CalibrateCmd {
    pub validation: PathBuf,
    pub format: Option<Format>,
    pub read: ReadOptions,
    pub measures: Vec<ConfidenceMeasure>,
    pub objective: CalibrationObjective,
    pub grid: TemperatureGrid,
    pub output: Option<PathBuf>,
}

/// Contents of the temperatures file written by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFile {
    pub source: String,
    pub samples: usize,
    pub grid: TemperatureGrid,
    pub objective: CalibrationObjective,
    pub nll: TemperatureFit,
    pub measures: BTreeMap<ConfidenceMeasure, TemperatureFit>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl TemperatureFile {
    pub fn temperatures(&self) -> BTreeMap<ConfidenceMeasure, f64> {
        self.measures
            .iter()
            .map(|(m, fit)| (*m, fit.temperature))
            .collect()
    }
}

pub fn fit_temperatures(
    validation: &Dataset,
    measures: &[ConfidenceMeasure],
    objective: &CalibrationObjective,
    grid: &TemperatureGrid,
) -> crate::Result<(TemperatureFit, BTreeMap<ConfidenceMeasure, TemperatureFit>)> {
    let nll = fit_nll(validation, grid)?;
    let mut fits = BTreeMap::new();
    for &m in measures {
        fits.insert(m, fit_for_measure(validation, m, objective, grid)?);
    }
    Ok((nll, fits))
}

pub fn cmd_calibrate(cmd: &CalibrateCmd) -> Result<TemperatureFile> {
    let ds = load(&cmd.validation, cmd.format, cmd.read)?;
    let (nll, measures) = fit_temperatures(&ds, &cmd.measures, &cmd.objective, &cmd.grid)
        .with_context(|| format!("calibrating on {}", cmd.validation.display()))?;
    let file = TemperatureFile {
        source: cmd.validation.display().to_string(),
        samples: ds.len(),
        grid: cmd.grid,
        objective: cmd.objective,
        nll,
        measures,
        metadata: ds.metadata.clone(),
    };
    if let Some(out) = &cmd.output {
        write_json(out, &file)?;
    }
    Ok(file)
}

pub fn read_temperature_file(path: &Path) -> Result<TemperatureFile> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&text).with_context(|| format!("{}: not a temperatures file", path.display()))
}

/// Where the TS-regime temperatures come from.
#[derive(Debug, Clone)]
pub enum TemperatureSource {
    /// Out-of-the-box evaluation only.
    None,
    /// The same temperature for every measure.
    Fixed(f64),
    /// A file written by `calibrate`.
    File(PathBuf),
    /// Fit on this validation set before evaluating.
    Fit(PathBuf),
}

#[derive(Debug, Clone)]
pub struct EvaluateCmd {
    pub input: PathBuf,
    pub format: Option<Format>,
    pub read: ReadOptions,
    pub measures: Vec<ConfidenceMeasure>,
    pub eval: EvalConfig,
    pub temperatures: TemperatureSource,
    pub objective: CalibrationObjective,
    pub grid: TemperatureGrid,
    pub percent: bool,
    pub output: Option<PathBuf>,
    pub scatter: Option<PathBuf>,
}

pub struct Evaluation {
    pub report: CalibrationReport,
    pub table: String,
}

pub fn cmd_evaluate(cmd: &EvaluateCmd) -> Result<Evaluation> {
    let ds = load(&cmd.input, cmd.format, cmd.read)?;
    let temps: Option<BTreeMap<ConfidenceMeasure, f64>> = match &cmd.temperatures {
        TemperatureSource::None => None,
        TemperatureSource::Fixed(t) => Some(cmd.measures.iter().map(|&m| (m, *t)).collect()),
        TemperatureSource::File(path) => {
            let file = read_temperature_file(path)?;
            let temps = file.temperatures();
            if let Some(m) = cmd.measures.iter().find(|m| !temps.contains_key(m)) {
                bail!("{}: no temperature for measure `{m}`", path.display());
            }
            Some(temps)
        }
        TemperatureSource::Fit(path) => {
            let val = load(path, cmd.format, cmd.read)?;
            let (_, fits) = fit_temperatures(&val, &cmd.measures, &cmd.objective, &cmd.grid)
                .with_context(|| format!("calibrating on {}", path.display()))?;
            Some(fits.into_iter().map(|(m, f)| (m, f.temperature)).collect())
        }
    };
    let report = evaluate_all(&ds, &cmd.eval, &cmd.measures, temps.as_ref())
        .with_context(|| format!("evaluating {}", cmd.input.display()))?;
    if let Some(out) = &cmd.output {
        write_json(out, &report)?;
    }
    if let Some(path) = &cmd.scatter {
        write_atomic(path, scatter_csv(&report).as_bytes())?;
    }
    let table = render_table(&report, cmd.percent);
    Ok(Evaluation { report, table })
}

/// One row per (measure, regime): calibration errors against sharpness.
pub fn scatter_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("measure,regime,temperature,ace_l1,ece_l1,ace_l2,ece_l2,sharpness\n");
    for m in &report.measures {
        let rows = std::iter::once(("oob", &m.oob)).chain(m.ts.as_ref().map(|ts| ("ts", ts)));
        for (regime, r) in rows {
            writeln!(
                out,
                "{},{regime},{},{},{},{},{},{}",
                m.measure, r.temperature, r.ace_l1, r.ece_l1, r.ace_l2, r.ece_l2, r.sharpness
            )
            .unwrap();
        }
    }
    out
}

/// Aligned text table: one section per regime, one row per measure.
pub fn render_table(report: &CalibrationReport, percent: bool) -> String {
    let scale = if percent { 100.0 } else { 1.0 };
    let unit = if percent { " (x100)" } else { "" };
    let mut out = String::new();
    writeln!(
        out,
        "samples={} classes={} accuracy={:.4} bins={} strategy={}",
        report.samples, report.classes, report.accuracy, report.config.bins, report.config.strategy
    )
    .unwrap();

    let mut section = |title: &str, rows: Vec<(ConfidenceMeasure, &RegimeMetrics)>| {
        if rows.is_empty() {
            return;
        }
        writeln!(out, "\n{title}{unit}").unwrap();
        writeln!(
            out,
            "{:<8} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "measure", "T", "ACE", "ECE", "ACE-l2", "ECE-l2", "sharp", "l2-loss", "var", "cal-l2"
        )
        .unwrap();
        for (m, r) in rows {
            let d = &r.decomposition;
            writeln!(
                out,
                "{:<8} {:>6.3} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                m.name(),
                r.temperature,
                r.ace_l1 * scale,
                r.ece_l1 * scale,
                r.ace_l2 * scale,
                r.ece_l2 * scale,
                r.sharpness * scale,
                d.l2_loss * scale,
                d.variance_term * scale,
                d.calibration_l2 * scale
            )
            .unwrap();
        }
    };
    section(
        "Out-of-the-box evaluation",
        report.measures.iter().map(|m| (m.measure, &m.oob)).collect(),
    );
    section(
        "With temperature scaling",
        report
            .measures
            .iter()
            .filter_map(|m| m.ts.as_ref().map(|ts| (m.measure, ts)))
            .collect(),
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub measure: ConfidenceMeasure,
    pub score: f64,
}

/// Scores over the barycentric grid `(i, j, l) / resolution` of the 2-simplex.
pub fn heatmap(measures: &[ConfidenceMeasure], resolution: usize) -> crate::Result<Vec<HeatmapRow>> {
    if resolution < 2 {
        return Err(crate::Error::Domain(format!(
            "heatmap resolution must be at least 2, got {resolution}"
        )));
    }
    let r = resolution as f64;
    let mut rows = Vec::new();
    for i in (0..=resolution).rev() {
        for j in (0..=resolution - i).rev() {
            let l = resolution - i - j;
            let v = ProbVector::new(vec![i as f64 / r, j as f64 / r, l as f64 / r])?;
            for &m in measures {
                rows.push(HeatmapRow {
                    v1: v.as_slice()[0],
                    v2: v.as_slice()[1],
                    v3: v.as_slice()[2],
                    measure: m,
                    score: m.score(&v),
                });
            }
        }
    }
    Ok(rows)
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::from("v1,v2,v3,measure,score\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.v1, r.v2, r.v3, r.measure, r.score).unwrap();
    }
    out
}

pub fn cmd_heatmap(measures: &[ConfidenceMeasure], resolution: usize, output: Option<&Path>) -> Result<String> {
    let csv = heatmap_csv(&heatmap(measures, resolution)?);
    if let Some(path) = output {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(csv)
}
