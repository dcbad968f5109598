use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use confcal::cli::{
    cmd_calibrate, cmd_evaluate, cmd_heatmap, cmd_synth, parse_measures, CalibrateCmd,
    EvaluateCmd, SynthCmd, TemperatureSource,
};
use confcal::{
    BinStrategy, BinningConfig, CalibrationObjective, EvalConfig, Format, Norm, ReadOptions,
    SynthConfig, TemperatureGrid, DEFAULT_BINS,
};

#[derive(Parser)]
#[command(name = "confcal", version, about = "Confidence measures, calibration error and temperature scaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic prediction dataset with known ground truth.
    Synth(SynthArgs),
    /// Fit per-measure temperatures (and the NLL temperature) on a validation set.
    Calibrate(CalibrateArgs),
    /// Report calibration error and sharpness for each measure.
    Evaluate(EvaluateArgs),
    /// Tabulate measures over a barycentric grid of the 3-class simplex.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct InputOpts {
    /// Input format; inferred from the file extension when omitted.
    #[arg(long, value_parser = ["jsonl", "csv"])]
    format: Option<String>,
    /// Renormalize probability rows whose sum is off by at most 1e-3.
    #[arg(long)]
    renormalize: bool,
    /// Recover logits as ln(max(p, EPSILON)) for records that only carry probabilities.
    #[arg(long)]
    epsilon: Option<f64>,
}

impl InputOpts {
    fn format(&self) -> Result<Option<Format>> {
        Ok(self.format.as_deref().map(str::parse).transpose()?)
    }

    fn read(&self) -> Result<ReadOptions> {
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                bail!("--epsilon must lie in (0, 1), got {eps}");
            }
        }
        Ok(ReadOptions {
            renormalize: self.renormalize,
            recover_logits: self.epsilon,
        })
    }
}

#[derive(Args)]
struct FitOpts {
    /// Confidence measure(s): max, margin2, margin3, entropy, a comma list, or all.
    #[arg(long, default_value = "all")]
    measure: String,
    #[arg(long, default_value = "adaptive", value_parser = ["fixed", "adaptive"])]
    binning: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value = "l1", value_parser = ["l1", "l2"])]
    norm: String,
    #[arg(long, default_value_t = 0.05)]
    t_min: f64,
    #[arg(long, default_value_t = 5.0)]
    t_max: f64,
    #[arg(long, default_value_t = 200)]
    t_steps: usize,
}

impl FitOpts {
    fn strategy(&self) -> Result<BinStrategy> {
        Ok(self.binning.parse()?)
    }

    fn objective(&self) -> Result<CalibrationObjective> {
        if self.bins == 0 {
            bail!("--bins must be at least 1");
        }
        Ok(CalibrationObjective {
            binning: BinningConfig {
                strategy: self.strategy()?,
                n: self.bins,
            },
            norm: self.norm.parse::<Norm>()?,
        })
    }

    fn grid(&self) -> Result<TemperatureGrid> {
        TemperatureGrid::new(self.t_min, self.t_max, self.t_steps)
            .map_err(|e| anyhow::anyhow!("--t-min/--t-max/--t-steps: {e}"))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of records.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Symmetric Dirichlet concentration.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Factor applied to the true log-probabilities; 1 is calibrated.
    #[arg(long, default_value_t = 1.0)]
    distortion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tag records with one of this many domains.
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long, value_parser = ["jsonl", "csv"])]
    format: Option<String>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    validation: PathBuf,
    #[command(flatten)]
    input: InputOpts,
    #[command(flatten)]
    fit: FitOpts,
    /// Temperatures file (JSON); printed to stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fit temperatures on this validation set and add a temperature-scaled section.
    #[arg(long, conflicts_with_all = ["temperatures", "temperature"])]
    validation: Option<PathBuf>,
    /// Temperatures file written by `calibrate`.
    #[arg(long, conflicts_with = "temperature")]
    temperatures: Option<PathBuf>,
    /// Use one temperature for every measure.
    #[arg(long)]
    temperature: Option<f64>,
    #[command(flatten)]
    input_opts: InputOpts,
    #[command(flatten)]
    fit: FitOpts,
    /// Display values multiplied by 100 in the printed table.
    #[arg(long)]
    percent: bool,
    /// Report file (JSON).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Scatter file (CSV): calibration error against sharpness per measure and regime.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long, default_value = "all")]
    measure: String,
    /// Subdivisions per simplex edge.
    #[arg(long, default_value_t = 30)]
    resolution: usize,
    /// CSV output; printed to stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cmd = SynthCmd {
                config: SynthConfig {
                    n: a.n,
                    k: a.k,
                    alpha: a.alpha,
                    distortion_a: a.distortion,
                    seed: a.seed,
                    domain_count: a.domains,
                },
                format: a.format.as_deref().map(str::parse).transpose()?,
                output: a.output,
            };
            let sidecar = cmd_synth(&cmd)?;
            eprintln!("wrote {} and {}", cmd.output.display(), sidecar.display());
        }
        Command::Calibrate(a) => {
            let cmd = CalibrateCmd {
                validation: a.validation,
                format: a.input.format()?,
                read: a.input.read()?,
                measures: parse_measures(&a.fit.measure)?,
                objective: a.fit.objective()?,
                grid: a.fit.grid()?,
                output: a.output,
            };
            let file = cmd_calibrate(&cmd)?;
            if cmd.output.is_none() {
                println!("{}", serde_json::to_string_pretty(&file)?);
            } else {
                eprintln!("nll: T = {:.4}", file.nll.temperature);
                for (m, fit) in &file.measures {
                    eprintln!("{m}: T = {:.4} (objective {:.6})", fit.temperature, fit.objective_value);
                }
            }
        }
        Command::Evaluate(a) => {
            let temperatures = match (a.validation, a.temperatures, a.temperature) {
                (Some(v), _, _) => TemperatureSource::Fit(v),
                (_, Some(f), _) => TemperatureSource::File(f),
                (_, _, Some(t)) => TemperatureSource::Fixed(t),
                _ => TemperatureSource::None,
            };
            if a.fit.bins == 0 {
                bail!("--bins must be at least 1");
            }
            let cmd = EvaluateCmd {
                input: a.input,
                format: a.input_opts.format()?,
                read: a.input_opts.read()?,
                measures: parse_measures(&a.fit.measure)?,
                eval: EvalConfig {
                    bins: a.fit.bins,
                    strategy: a.fit.strategy()?,
                },
                temperatures,
                objective: a.fit.objective()?,
                grid: a.fit.grid()?,
                percent: a.percent,
                output: a.output,
                scatter: a.scatter,
            };
            print!("{}", cmd_evaluate(&cmd)?.table);
        }
        Command::Heatmap(a) => {
            let measures = parse_measures(&a.measure)?;
            let csv = cmd_heatmap(&measures, a.resolution, a.output.as_deref())?;
            if a.output.is_none() {
                print!("{csv}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
