//! Mini-batch Adam training with a geometric learning-rate decay and a
//! phased sparsity schedule.
//!
//! The sparsity weight follows the epoch fraction `p = epoch / epochs`:
//! zero while `p < warmup`, a linear ramp up to `lambda` until `ramp_end`,
//! then constant. At the first epoch with `p ≥ prune_at` every weight with
//! `|w| < prune_tol` is set to zero and frozen there, and the remaining
//! epochs fine-tune without the penalty. A final threshold pass runs after
//! the last epoch. With `lambda = 0` none of this happens and training is
//! plain maximum likelihood.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Matrix, TapeError};
use crate::coupling::InvertibleStack;
use crate::eql::{l05_penalty, l05_penalty_on_tape, ParamRole};
use crate::flows::{Dataset, FlowError, LossGraph, Model};
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        /// Parameters before the failing update.
        last_good: Box<Model>,
    },
    #[error("history export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("history export failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Sparsity weight reached after the ramp.
    pub lambda: f64,
    /// Smoothing threshold `a` of the L0.5 penalty.
    pub l05_threshold: f64,
    pub warmup: f64,
    pub ramp_end: f64,
    pub prune_at: f64,
    pub prune_tol: f64,
    /// Largest global L2 norm of a gradient step; larger gradients are
    /// rescaled to it. 0 disables clipping.
    pub grad_clip: f64,
    /// Shuffle stream seed; set from the run seed rather than read from
    /// config files.
    #[serde(skip)]
    pub seed: u64,
    /// Checkpoint period in epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 500,
            lr_start: 1e-2,
            lr_end: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 1e-3,
            l05_threshold: 0.05,
            warmup: 0.2,
            ramp_end: 0.5,
            prune_at: 0.8,
            prune_tol: 0.01,
            grad_clip: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad("learning rates must satisfy lr_start >= lr_end > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.l05_threshold > 0.0 && self.l05_threshold.is_finite()) {
            return bad("l05_threshold must be positive");
        }
        if !(0.0 <= self.warmup
            && self.warmup <= self.ramp_end
            && self.ramp_end <= self.prune_at
            && self.prune_at <= 1.0)
        {
            return bad("phase boundaries must satisfy 0 <= warmup <= ramp_end <= prune_at <= 1");
        }
        if !(self.prune_tol >= 0.0 && self.prune_tol.is_finite()) {
            return bad("prune_tol must be finite and non-negative");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be finite and non-negative");
        }
        Ok(())
    }

    fn phased(&self) -> bool {
        self.lambda > 0.0
    }

    /// Sparsity weight during `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if !self.phased() || self.epochs == 0 {
            return 0.0;
        }
        let p = epoch as f64 / self.epochs as f64;
        if p < self.warmup || p >= self.prune_at {
            0.0
        } else if p < self.ramp_end {
            self.lambda * (p - self.warmup) / (self.ramp_end - self.warmup)
        } else {
            self.lambda
        }
    }

    /// First epoch of the pruned fine-tuning phase.
    pub fn prune_epoch(&self) -> Option<usize> {
        if !self.phased() {
            return None;
        }
        (0..self.epochs).find(|&e| e as f64 / self.epochs as f64 >= self.prune_at)
    }
}

/// Geometric interpolation from `lr_start` at step 0 to `lr_end` at step
/// `total_steps − 1`.
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return config.lr_start;
    }
    let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    config.lr_start * (config.lr_end / config.lr_start).powf(t)
}

/// First and second moment estimates for every parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Matrix> = shapes.into_iter().map(Array2::zeros).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching the parameters.
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<(), TapeError> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    if let Some(i) = grads.iter().position(|g| !g.iter().all(|v| v.is_finite())) {
        return Err(TapeError::NonFinite {
            node: i,
            op: "gradient",
        });
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + config.adam_eps);
        });
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; a
/// non-positive bound leaves them untouched.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads {
            g.mapv_inplace(|v| v * f);
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch NLL over the epoch, without the penalty.
    pub loss: f64,
    /// L0.5 penalty of the model at the end of the epoch.
    pub penalty: f64,
    pub lambda: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub nonzero_weights: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch. Kept out of the CSV so that exported
    /// histories are reproducible byte for byte.
    pub wall_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(["epoch", "loss", "penalty", "lambda", "lr", "nonzero_weights"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Plain-text wall-time log, one `epoch seconds` line per epoch.
    pub fn save_timing(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (r, s) in self.records.iter().zip(&self.wall_seconds) {
            writeln!(f, "{} {:.6}", r.epoch, s)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Mean of the first and last `window` epoch losses.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |rs: &[EpochRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..w]), mean(&self.records[n - w..])))
    }
}

/// Loss graph for `batch` with `lambda · Σ L0.5(weights)` added when
/// `lambda > 0`.
pub fn objective_graph(
    model: &Model,
    batch: &Dataset,
    lambda: f64,
    l05_threshold: f64,
) -> Result<LossGraph, FlowError> {
    let mut g = model.loss_graph(batch)?;
    if lambda > 0.0 {
        let mut total = None;
        for block in g.vars.blocks() {
            for net in block.subnets() {
                if let Some(p) = l05_penalty_on_tape(&mut g.tape, net, l05_threshold) {
                    total = Some(match total {
                        Some(t) => g.tape.add(t, p),
                        None => p,
                    });
                }
            }
        }
        if let Some(p) = total {
            let p = g.tape.scale(p, lambda);
            g.loss = g.tape.add(g.loss, p);
        }
    }
    Ok(g)
}

fn params_of(stack: &InvertibleStack) -> (Vec<Matrix>, Vec<ParamRole>) {
    let mut params = Vec::new();
    let mut roles = Vec::new();
    stack.for_each_param(&mut |role, m| {
        params.push(m.clone());
        roles.push(role);
    });
    (params, roles)
}

fn store_params(stack: &mut InvertibleStack, params: &[Matrix]) {
    let mut it = params.iter();
    stack.for_each_param_mut(&mut |_, m| m.assign(it.next().expect("same parameter count")));
}

fn model_penalty(stack: &InvertibleStack, a: f64) -> f64 {
    stack
        .blocks()
        .flat_map(|b| b.subnets())
        .map(|n| l05_penalty(n, a).expect("validated threshold"))
        .sum()
}

fn nonzero_weights(stack: &InvertibleStack) -> usize {
    stack
        .blocks()
        .flat_map(|b| b.subnets())
        .map(|n| n.nonzero_weights())
        .sum()
}

/// Zeroes small weights and returns the mask of survivors (`1` kept, `0`
/// frozen) for every parameter; biases are never masked.
fn prune(params: &mut [Matrix], roles: &[ParamRole], tol: f64) -> Vec<Matrix> {
    params
        .iter_mut()
        .zip(roles)
        .map(|(p, role)| match role {
            ParamRole::Weight => {
                p.mapv_inplace(|w| if w.abs() < tol { 0.0 } else { w });
                p.mapv(|w| if w == 0.0 { 0.0 } else { 1.0 })
            }
            ParamRole::Bias => Matrix::ones(p.dim()),
        })
        .collect()
}

/// Trains `model` on `data`. See [`train_with_checkpoints`].
pub fn train(model: &Model, data: &Dataset, config: &TrainConfig) -> Result<(Model, TrainHistory), TrainError> {
    train_with_checkpoints(model, data, config, &mut |_, _| Ok(()))
}

/// Trains `model` on `data`, calling `checkpoint(epoch, model)` after every
/// `checkpoint_every`-th epoch. On a non-finite loss or gradient the error
/// carries the parameters from before the failing step.
pub fn train_with_checkpoints(
    model: &Model,
    data: &Dataset,
    config: &TrainConfig,
    checkpoint: &mut dyn FnMut(usize, &Model) -> Result<(), TrainError>,
) -> Result<(Model, TrainHistory), TrainError> {
    config.validate()?;
    if model.needs_observations() && data.y.is_none() {
        return Err(FlowError::MissingObservations.into());
    }
    let mut model = model.clone();
    let mut history = TrainHistory::default();
    if config.epochs == 0 || data.is_empty() {
        return Ok((model, history));
    }

    let (mut params, roles) = params_of(model.stack());
    let mut adam = AdamState::new(params.iter().map(|p| p.dim()));
    let mut masks: Option<Vec<Matrix>> = None;
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let prune_epoch = config.prune_epoch();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        if Some(epoch) == prune_epoch {
            masks = Some(prune(&mut params, &roles, config.prune_tol));
            store_params(model.stack_mut(), &params);
            // Stale moments would push frozen weights off zero on the first
            // fine-tuning steps.
            adam = AdamState::new(params.iter().map(|p| p.dim()));
        }
        let lambda = config.lambda_at(epoch);
        order.shuffle(&mut rng::stream(config.seed, Purpose::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = config.lr_start;

        for idx in order.chunks(config.batch_size) {
            let batch = data.rows(idx);
            let mut g = objective_graph(&model, &batch, lambda, config.l05_threshold)?;
            let fail = |what| TrainError::NonFinite {
                what,
                epoch,
                step,
                last_good: Box::new(model.clone()),
            };
            if g.tape.forward_eval(&g.inputs).is_err() {
                return Err(fail("loss"));
            }
            let loss = g.tape.scalar(g.nll).expect("scalar loss");
            if !loss.is_finite() {
                return Err(fail("loss"));
            }
            let grads = match g.tape.backward(g.loss) {
                Ok(gr) => gr.into_vec(),
                Err(_) => return Err(fail("gradient")),
            };
            let mut grads: Vec<Matrix> = match &masks {
                Some(ms) => grads.into_iter().zip(ms).map(|(g, m)| g * m).collect(),
                None => grads,
            };
            clip_global_norm(&mut grads, config.grad_clip);
            lr = lr_at(config, step, total_steps);
            if adam_step(&mut params, &grads, &mut adam, lr, config).is_err() {
                return Err(fail("gradient"));
            }
            if let Some(ms) = &masks {
                for (p, m) in params.iter_mut().zip(ms) {
                    *p *= m;
                }
            }
            store_params(model.stack_mut(), &params);
            loss_sum += loss * idx.len() as f64;
            step += 1;
        }

        let batch_nll = loss_sum / data.len() as f64;
        let penalty = model_penalty(model.stack(), config.l05_threshold);
        history.records.push(EpochRecord {
            epoch,
            loss: batch_nll,
            penalty,
            lambda,
            lr,
            nonzero_weights: nonzero_weights(model.stack()),
        });
        history.wall_seconds.push(started.elapsed().as_secs_f64());
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            checkpoint(epoch, &model)?;
        }
    }

    if config.phased() {
        prune(&mut params, &roles, config.prune_tol);
        store_params(model.stack_mut(), &params);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eql::ActivationLibrary;
    use crate::flows::{Architecture, FlowModel};
    use ndarray::array;

    #[test]
    fn lr_schedule_endpoints() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, 0, 101), 1e-2);
        assert!((lr_at(&c, 100, 101) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&c, 50, 101) - 1e-3).abs() < 1e-15);
        assert_eq!(lr_at(&c, 0, 1), 1e-2);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let c = TrainConfig::default();
        let mut p = vec![array![[1.5, -2.0]]];
        let mut s = AdamState::new([(1, 2)]);
        adam_step(&mut p, &[array![[0.0, 0.0]]], &mut s, 0.1, &c).unwrap();
        assert_eq!(p[0], array![[1.5, -2.0]]);
    }

    #[test]
    fn first_step_matches_formula() {
        let c = TrainConfig::default();
        let g = 0.3;
        let mut p = vec![array![[1.0]]];
        let mut s = AdamState::new([(1, 1)]);
        adam_step(&mut p, &[array![[g]]], &mut s, 0.01, &c).unwrap();
        let m_hat = (0.1 * g) / 0.1;
        let v_hat = (0.001 * g * g) / 0.001;
        let expected = 1.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0][[0, 0]] - expected).abs() < 1e-15);
        assert!((p[0][[0, 0]] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let c = TrainConfig::default();
        let mut p = vec![array![[1.0]]];
        let mut s = AdamState::new([(1, 1)]);
        assert!(adam_step(&mut p, &[array![[f64::NAN]]], &mut s, 0.01, &c).is_err());
        assert_eq!(p[0][[0, 0]], 1.0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn quadratic_converges() {
        let c = TrainConfig::default();
        let mut p = vec![array![[1.0]]];
        let mut s = AdamState::new([(1, 1)]);
        for _ in 0..200 {
            let g = p[0].clone();
            adam_step(&mut p, &[g], &mut s, 0.1, &c).unwrap();
        }
        assert!(p[0][[0, 0]].abs() < 1e-3, "{}", p[0][[0, 0]]);
    }

    #[test]
    fn lambda_phases() {
        let c = TrainConfig {
            epochs: 10,
            lambda: 1.0,
            ..TrainConfig::default()
        };
        let ls: Vec<f64> = (0..10).map(|e| c.lambda_at(e)).collect();
        assert_eq!(&ls[..2], &[0.0, 0.0]);
        assert!((ls[3] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(&ls[5..8], &[1.0, 1.0, 1.0]);
        assert_eq!(&ls[8..], &[0.0, 0.0]);
        assert_eq!(c.prune_epoch(), Some(8));
        let off = TrainConfig { lambda: 0.0, ..c };
        assert_eq!(off.prune_epoch(), None);
    }

    #[test]
    fn invalid_configs() {
        let base = TrainConfig::default();
        for c in [
            TrainConfig {
                batch_size: 0,
                ..base.clone()
            },
            TrainConfig {
                lr_end: 1.0,
                ..base.clone()
            },
            TrainConfig {
                warmup: 0.9,
                ..base.clone()
            },
            TrainConfig {
                lambda: -1.0,
                ..base.clone()
            },
        ] {
            assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        }
    }

    fn small_problem() -> (Model, Dataset) {
        let arch = Architecture {
            blocks: 1,
            hidden_layers: 1,
            library: ActivationLibrary::default(),
            clamp: 2.0,
        };
        let model = Model::Flow(FlowModel::new(2, 0, &arch, 3).unwrap());
        let x = crate::flows::gaussian_latents(256, 2, 4).mapv(|v| 0.5 * v + 1.0);
        (model, Dataset::unlabeled(x))
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (model, data) = small_problem();
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, h) = train(&model, &data, &c).unwrap();
        assert_eq!(trained, model);
        assert!(h.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_prunes() {
        let (model, data) = small_problem();
        let c = TrainConfig {
            epochs: 10,
            batch_size: 32,
            lambda: 1e-2,
            seed: 8,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&model, &data, &c).unwrap();
        let (b, hb) = train(&model, &data, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.records, hb.records);
        assert_eq!(ha.records.len(), 10);
        let (first, last) = ha.smoothed_ends(3).unwrap();
        assert!(last < first);
        a.stack().for_each_param(&mut |role, m| {
            if role == ParamRole::Weight {
                assert!(m.iter().all(|w| *w == 0.0 || w.abs() >= c.prune_tol));
            }
        });
    }

    #[test]
    fn nan_aborts_with_last_good_model() {
        let (model, _) = small_problem();
        let data = Dataset::unlabeled(array![[f64::NAN, 0.0], [1.0, 1.0]]);
        let c = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        match train(&model, &data, &c) {
            Err(TrainError::NonFinite { last_good, epoch, .. }) => {
                assert_eq!(epoch, 0);
                assert_eq!(*last_good, model);
            }
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn empty_history_csv_has_header() {
        let mut out = Vec::new();
        TrainHistory::default().write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,loss,penalty,lambda,lr,nonzero_weights\n"
        );
    }
}
