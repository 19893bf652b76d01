//! `isrflow`: train, sample, extract, evaluate, and run the rejection
//! oracle from the command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isrflow::experiment::{self, EvalOptions, ExperimentError};
use isrflow::io::{column_names, load_matrix_csv, save_matrix_csv, write_atomic, write_matrix_csv};
use isrflow::{selftest, ConfigError, IoError, Matrix, ModelFile, RunConfig, TrainError};
use thiserror::Error;

#[derive(Parser, Debug)]
#[command(name = "isrflow", version, about = "Invertible symbolic regression flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples (density model) or posterior samples at y* (inverse model).
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the learned map as expressions.
    Extract {
        #[arg(long)]
        model: PathBuf,
        /// Directory for expressions.txt and expressions.json (default:
        /// text to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model (or a sample CSV) against its benchmark.
    Evaluate {
        #[arg(long, required_unless_present = "samples", conflicts_with = "samples")]
        model: Option<PathBuf>,
        /// Pre-drawn samples to score instead of a model; needs --config.
        #[arg(long, requires = "config")]
        samples: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reference sample CSV (default: fresh target draws or an oracle run).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ground-truth posterior of the kinematics benchmark by rejection sampling.
    Oracle {
        /// Benchmark parameters (default: built-in kinematics settings).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct Target {
    /// Observation y* as `y1,y2`.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    target_y: Option<[f64; 2]>,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b] = parts.as_slice() else {
        return Err(format!("expected two comma-separated numbers, got `{s}`"));
    };
    let parse = |t: &str| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number"));
    let pair = [parse(a)?, parse(b)?];
    if pair.iter().all(|v| v.is_finite()) {
        Ok(pair)
    } else {
        Err("y* must be finite".into())
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(#[from] IoError),
    #[error("{0}")]
    Experiment(#[from] ExperimentError),
    #[error("{0}")]
    Usage(String),
}

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_INVALID_CONFIG,
            CliError::Experiment(ExperimentError::Train(TrainError::NonFinite { .. })) => EXIT_NON_FINITE,
            CliError::Experiment(ExperimentError::Train(TrainError::Config(_))) => EXIT_INVALID_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Sizes the global thread pool from `ISRFLOW_THREADS` when set.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ISRFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("ISRFLOW_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Train { config, out, seed } => train(&config, out, seed),
        Command::Sample {
            model,
            target,
            n,
            seed,
            out,
        } => {
            let file = ModelFile::load(&model)?;
            let (header, samples) = experiment::sample(&file, target.target_y, n, seed)?;
            emit_csv(out.as_deref(), &header, &samples)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Extract { model, out } => {
            let file = ModelFile::load(&model)?;
            let (text, json) = experiment::extract(&file)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(IoError::from)?;
                    write_atomic(&dir.join("expressions.txt"), text.as_bytes())?;
                    write_atomic(&dir.join("expressions.json"), json.as_bytes())?;
                }
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            model,
            samples,
            config,
            reference,
            target,
            eps,
            seed,
            out,
        } => {
            let opts = EvalOptions {
                seed,
                target_y: target.target_y,
                eps,
                reference: reference.as_deref().map(load_matrix_csv).transpose()?.map(|(_, m)| m),
            };
            let report = match (model, samples) {
                (Some(model), _) => {
                    let file = ModelFile::load(&model)?;
                    experiment::evaluate(&file, &opts)?
                }
                (None, Some(samples)) => {
                    let cfg = RunConfig::load(config.as_deref().expect("required by clap"))?;
                    let (_, m) = load_matrix_csv(&samples)?;
                    experiment::evaluate_samples(&cfg, &m, &opts)?
                }
                (None, None) => unreachable!("clap requires --model or --samples"),
            };
            let mut json = serde_json::to_string_pretty(&report).map_err(IoError::from)?;
            json.push('\n');
            emit_text(out.as_deref(), &json)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle {
            config,
            target,
            eps,
            n,
            seed,
            out,
        } => {
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::from_toml("experiment = \"inverse\"\n[benchmark]\nkind = \"kinematics\"\n")?,
            };
            let y = target.target_y.unwrap_or(cfg.benchmark.target_y);
            let eps = eps.unwrap_or(cfg.benchmark.eps);
            let result = experiment::oracle(&cfg, y, eps, n, seed)?;
            eprintln!(
                "accepted {} of {} draws (rate {:.3e})",
                result.samples.nrows(),
                result.draws,
                result.acceptance_rate
            );
            emit_csv(out.as_deref(), &column_names("x", 4), &result.samples)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { seed } => {
            let outcomes = selftest::run_all(seed);
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            Ok(if outcomes.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            })
        }
    }
}

fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<ExitCode, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir).map_err(IoError::from)?;
    let checkpoint = dir.join("checkpoint.json");
    let (file, history) = match experiment::run_training(&cfg, Some(&checkpoint)) {
        Ok(r) => r,
        Err(e @ ExperimentError::Train(TrainError::NonFinite { .. })) => {
            eprintln!("last good parameters written to {}", checkpoint.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    file.save(&dir.join("model.json"))?;
    let mut csv = Vec::new();
    history
        .write_csv(&mut csv)
        .map_err(|e| CliError::Experiment(e.into()))?;
    write_atomic(&dir.join("history.csv"), &csv)?;
    history
        .save_timing(&dir.join("timing.log"))
        .map_err(|e| CliError::Experiment(e.into()))?;
    if let Some(last) = history.records.last() {
        eprintln!(
            "trained {} epochs, final loss {:.4}, {} nonzero weights",
            history.records.len(),
            last.loss,
            last.nonzero_weights
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn emit_csv(out: Option<&Path>, header: &[String], m: &Matrix) -> Result<(), CliError> {
    match out {
        Some(path) => save_matrix_csv(path, header, m)?,
        None => write_matrix_csv(std::io::stdout().lock(), header, m)?,
    }
    Ok(())
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(IoError::from)?,
    }
    Ok(())
}
