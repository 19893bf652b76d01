//! End-to-end pipelines behind the command-line tool: build a model from a
//! run config, train it, sample from it, read off its expressions and
//! score it against the benchmark.

use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::benchmarks::{self, BenchError, MetricsReport, RejectionResult};
use crate::config::{BenchmarkKind, ExperimentKind, RunConfig};
use crate::flows::{CisrModel, Dataset, FlowError, FlowModel, IsrModel, Model};
use crate::io::{column_names, HistoryDigest, IoError, ModelFile};
use crate::rng::Purpose;
use crate::symbolic::{compose_model, InvertibleExpressionSet};
use crate::train::{train_with_checkpoints, TrainError, TrainHistory};

/// Width of the kinematics parameter vector.
pub const KINEMATICS_X: usize = 4;
/// Width of the kinematics observation.
pub const KINEMATICS_Y: usize = 2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Usage(String),
}

/// Training data of the configured benchmark.
pub fn training_data(cfg: &RunConfig) -> Result<Dataset, ExperimentError> {
    let b = &cfg.benchmark;
    Ok(match b.kind.distribution() {
        Some(kind) => Dataset::unlabeled(benchmarks::sample_target(kind, b.n_train, cfg.seed)?),
        None => b.kinematics.dataset(b.n_train, cfg.seed)?,
    })
}

/// Untrained model of the configured experiment.
pub fn build_model(cfg: &RunConfig) -> Result<Model, ExperimentError> {
    let m = &cfg.model;
    let arch = m.architecture();
    let mut model = match cfg.experiment {
        ExperimentKind::Density => Model::Flow(FlowModel::new(2, m.padding, &arch, cfg.seed)?),
        ExperimentKind::Inverse => Model::Isr(IsrModel::new(
            KINEMATICS_X,
            KINEMATICS_Y,
            m.padding,
            m.sigma2,
            &arch,
            cfg.seed,
        )?),
        ExperimentKind::ConditionalInverse => {
            Model::Cisr(CisrModel::new(KINEMATICS_X, KINEMATICS_Y, m.padding, &arch, cfg.seed)?)
        }
    };
    model.set_pad_weight(m.pad_weight);
    Ok(model)
}

/// Trains the configured model. With `checkpoint` set, the model is saved
/// there every `train.checkpoint_every` epochs and, on a non-finite loss,
/// the last good parameters are written there before the error returns.
pub fn run_training(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(ModelFile, TrainHistory), ExperimentError> {
    let data = training_data(cfg)?;
    let model = build_model(cfg)?;
    let tc = cfg.train_config();
    let snapshot = |m: &Model, h: HistoryDigest| ModelFile::new(cfg.clone(), m.clone(), h);
    let mut save_checkpoint = |epoch: usize, m: &Model| -> Result<(), TrainError> {
        if let Some(path) = checkpoint {
            let digest = HistoryDigest {
                epochs: epoch + 1,
                ..HistoryDigest::default()
            };
            snapshot(m, digest)
                .save(path)
                .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
        }
        Ok(())
    };
    match train_with_checkpoints(&model, &data, &tc, &mut save_checkpoint) {
        Ok((trained, history)) => Ok((snapshot(&trained, HistoryDigest::from(&history)), history)),
        Err(TrainError::NonFinite {
            what,
            epoch,
            step,
            last_good,
        }) => {
            if let Some(path) = checkpoint {
                snapshot(
                    &last_good,
                    HistoryDigest {
                        epochs: epoch,
                        ..HistoryDigest::default()
                    },
                )
                .save(path)?;
            }
            Err(TrainError::NonFinite {
                what,
                epoch,
                step,
                last_good,
            }
            .into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Samples from a model file: data-space draws for a density model and
/// posterior draws at `y_star` (default: the configured target) for the
/// inverse models. Returns column names and rows.
pub fn sample(
    file: &ModelFile,
    y_star: Option<[f64; 2]>,
    n: usize,
    seed: u64,
) -> Result<(Vec<String>, Matrix), ExperimentError> {
    let y = y_star.unwrap_or(file.config.benchmark.target_y);
    let m = match &file.model {
        Model::Flow(f) => f.sample(n, seed)?,
        Model::Isr(f) => f.sample_posterior(&y, n, seed)?,
        Model::Cisr(f) => f.sample_posterior(&y, n, seed)?,
    };
    Ok((column_names("x", m.ncols()), m))
}

/// Expression set of a model file using its configured tolerances.
pub fn expressions(file: &ModelFile) -> InvertibleExpressionSet {
    let e = &file.config.extract;
    compose_model(&file.model, e.prune_tol, e.const_tol)
}

/// Human-readable rendering and JSON of the extracted expressions.
pub fn extract(file: &ModelFile) -> Result<(String, String), ExperimentError> {
    let set = expressions(file);
    let text = set.render(file.config.extract.digits);
    let mut json = serde_json::to_string_pretty(&set).map_err(IoError::from)?;
    json.push('\n');
    Ok((text, json))
}

/// Ground-truth posterior of the configured kinematics benchmark.
pub fn oracle(
    cfg: &RunConfig,
    y_star: [f64; 2],
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<RejectionResult, ExperimentError> {
    Ok(cfg.benchmark.kinematics.rejection_sample(y_star, eps, n, seed)?)
}

/// Options of an evaluation run.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub seed: u64,
    pub target_y: Option<[f64; 2]>,
    pub eps: Option<f64>,
    /// Reference samples to compare against instead of fresh target draws
    /// or an oracle run.
    pub reference: Option<Matrix>,
}

/// Scores `samples` (already drawn from some model) against the benchmark
/// of `cfg`.
pub fn evaluate_samples(
    cfg: &RunConfig,
    samples: &Matrix,
    opts: &EvalOptions,
) -> Result<MetricsReport, ExperimentError> {
    let b = &cfg.benchmark;
    let y_star = opts.target_y.unwrap_or(b.target_y);
    let eps = opts.eps.unwrap_or(b.eps);
    let kinematic = b.kind == BenchmarkKind::Kinematics;
    let reference = match (&opts.reference, b.kind.distribution()) {
        (Some(r), _) => r.clone(),
        (None, Some(kind)) => benchmarks::sample_target_from(kind, b.n_reference, opts.seed, Purpose::Evaluation)?,
        (None, None) => oracle(cfg, y_star, eps, b.n_reference, opts.seed)?.samples,
    };
    let mut report = MetricsReport {
        benchmark: format!("{:?}", b.kind).to_lowercase(),
        err_post: None,
        err_post_raw: None,
        err_resim: None,
        nll: None,
        n_model_samples: samples.nrows(),
        n_reference_samples: reference.nrows(),
        seed: opts.seed,
        target_y: kinematic.then(|| y_star.to_vec()),
        eps: (kinematic && opts.reference.is_none()).then_some(eps),
        kernel: MetricsReport::kernel_description(),
    };
    report.set_mmd(benchmarks::mmd(samples, &reference)?);
    if kinematic {
        report.err_resim = Some(benchmarks::resim_error(&b.kinematics, samples, y_star)?);
    }
    Ok(report)
}

/// Draws `n_eval` samples from the model and scores them. Density models
/// also report their NLL on the reference set.
pub fn evaluate(file: &ModelFile, opts: &EvalOptions) -> Result<MetricsReport, ExperimentError> {
    let cfg = &file.config;
    let (_, samples) = sample(file, opts.target_y, cfg.benchmark.n_eval, opts.seed)?;
    let mut opts = opts.clone();
    if let (Model::Flow(_), None, Some(kind)) = (&file.model, &opts.reference, cfg.benchmark.kind.distribution()) {
        opts.reference = Some(benchmarks::sample_target_from(
            kind,
            cfg.benchmark.n_reference,
            opts.seed,
            Purpose::Evaluation,
        )?);
    }
    let mut report = evaluate_samples(cfg, &samples, &opts)?;
    if let (Model::Flow(f), Some(r)) = (&file.model, &opts.reference) {
        if r.ncols() == f.data_width() {
            report.nll = Some(f.nll(r)?);
        }
    }
    Ok(report)
}

/// Row-major `n × 2` grid of points covering `[lo, hi]²`, with cell area.
pub fn grid(lo: [f64; 2], hi: [f64; 2], per_axis: usize) -> (Matrix, f64) {
    let step = [(hi[0] - lo[0]) / per_axis as f64, (hi[1] - lo[1]) / per_axis as f64];
    let g = Array2::from_shape_fn((per_axis * per_axis, 2), |(k, j)| {
        let idx = if j == 0 { k / per_axis } else { k % per_axis };
        lo[j] + (idx as f64 + 0.5) * step[j]
    });
    (g, step[0] * step[1])
}

/// Midpoint-rule integral of the model density over a box.
pub fn density_integral(
    model: &FlowModel,
    lo: [f64; 2],
    hi: [f64; 2],
    per_axis: usize,
) -> Result<f64, ExperimentError> {
    let (g, area) = grid(lo, hi, per_axis);
    let ld = model.log_density(&g)?;
    Ok(ld.iter().map(|v| v.exp()).sum::<f64>() * area)
}
