//! The three model variants built on an [`InvertibleStack`] and their
//! negative log-likelihood losses.
//!
//! * [`FlowModel`]: `x → z`, density estimation.
//! * [`IsrModel`]: `x → [y, z]`, the first `d_y` outputs fit the observation
//!   and the rest are Gaussian latents.
//! * [`CisrModel`]: `x → z` with the observation concatenated to every
//!   subnetwork input.
//!
//! All losses are batch means. When the stack pads its input, the trailing
//! output coordinates are pulled towards zero by a weighted mean-square
//! penalty.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Matrix, NodeId, Tape, TapeError};
use crate::coupling::{pad_input, pad_penalty, CouplingError, InvertibleStack, StackSpec, StackVars};
use crate::eql::ActivationLibrary;
use crate::rng::{self, Purpose};

/// Default variance of the Gaussian around the observed `y`.
pub const DEFAULT_SIGMA2: f64 = 1e-2;
/// Default weight of the padding penalty.
pub const DEFAULT_PAD_WEIGHT: f64 = 1.0;
/// Rows per independently seeded latent chunk when sampling.
pub const SAMPLE_CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("{what}: expected width {expected}, got {got}")]
    Width {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sigma^2 must be positive and finite, got {0}")]
    InvalidSigma2(f64),
    #[error("observation width {y} exceeds data width {x}")]
    ObservationTooWide { x: usize, y: usize },
    #[error("this model needs observations y but the batch has none")]
    MissingObservations,
    #[error("batch has {x} inputs but {y} observations")]
    RowMismatch { x: usize, y: usize },
    #[error("model has non-finite weights")]
    NonFiniteWeights,
    #[error("inverse map overflows for latent row {row} after {MAX_LATENT_REDRAWS} redraws")]
    LatentOverflow { row: usize },
}

/// Architecture shared by every coupling block of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub blocks: usize,
    pub hidden_layers: usize,
    pub library: ActivationLibrary,
    pub clamp: f64,
}

impl Architecture {
    fn stack_spec(&self, data_width: usize, padding: usize, condition_width: usize, seed: u64) -> StackSpec {
        // Width 1 cannot be split, so a scalar input always gets one zero slot.
        let padding = padding.max(2usize.saturating_sub(data_width));
        StackSpec {
            data_width,
            padding,
            condition_width,
            blocks: self.blocks,
            hidden_layers: self.hidden_layers,
            library: self.library.clone(),
            clamp: self.clamp,
            seed,
        }
    }
}

/// Inputs `x` and optional observations `y`, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Option<Matrix>,
}

impl Dataset {
    pub fn unlabeled(x: Matrix) -> Self {
        Self { x, y: None }
    }

    pub fn labeled(x: Matrix, y: Matrix) -> Result<Self, FlowError> {
        if x.nrows() != y.nrows() {
            return Err(FlowError::RowMismatch {
                x: x.nrows(),
                y: y.nrows(),
            });
        }
        Ok(Self { x, y: Some(y) })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx`, in that order.
    pub fn rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            y: self.y.as_ref().map(|y| y.select(Axis(0), idx)),
        }
    }
}

fn check_width(what: &'static str, m: &Matrix, expected: usize) -> Result<(), FlowError> {
    if m.ncols() != expected {
        return Err(FlowError::Width {
            what,
            expected,
            got: m.ncols(),
        });
    }
    Ok(())
}

fn sq_norms(m: ndarray::ArrayView2<'_, f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum())
}

/// Standard normal `n × width` latents, drawn in chunks of [`SAMPLE_CHUNK`]
/// rows where chunk `k` uses the `(seed, k)` latent stream.
pub fn gaussian_latents(n: usize, width: usize, seed: u64) -> Matrix {
    let chunks: Vec<Matrix> = (0..n.div_ceil(SAMPLE_CHUNK))
        .into_par_iter()
        .map(|k| {
            let rows = SAMPLE_CHUNK.min(n - k * SAMPLE_CHUNK);
            let mut rng = rng::stream(seed, Purpose::Latent, k as u64);
            Array2::from_shape_simple_fn((rows, width), || StandardNormal.sample(&mut rng))
        })
        .collect();
    if chunks.is_empty() {
        return Array2::zeros((0, width));
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

/// Redraws allowed per latent row whose inverse overflows.
pub const MAX_LATENT_REDRAWS: u64 = 64;

/// Maps `n` latent draws of `width` columns through `inverse`. A row whose
/// image is non-finite (far-tail latents can overflow a polynomial inverse)
/// is replaced by fresh draws from its own `(seed, Redraw, row)` stream, so
/// the result does not depend on chunking or thread count.
fn invert_latents<F>(n: usize, width: usize, out_width: usize, seed: u64, inverse: F) -> Result<Matrix, FlowError>
where
    F: Fn(&Matrix) -> Result<Matrix, FlowError> + Sync,
{
    let z = gaussian_latents(n, width, seed);
    let parts: Result<Vec<Matrix>, FlowError> = (0..n.div_ceil(SAMPLE_CHUNK))
        .into_par_iter()
        .map(|k| {
            let lo = k * SAMPLE_CHUNK;
            let chunk = z.slice(s![lo..(lo + SAMPLE_CHUNK).min(n), ..]).to_owned();
            match inverse(&chunk) {
                Err(FlowError::Coupling(CouplingError::NonFinite)) => {}
                other => return other,
            }
            let mut out = Array2::zeros((chunk.nrows(), out_width));
            for (i, row) in chunk.rows().into_iter().enumerate() {
                let mut zi = row.to_owned().insert_axis(Axis(0));
                let mut redraws = rng::stream(seed, Purpose::Redraw, (lo + i) as u64);
                let mut attempt = 0;
                let x = loop {
                    match inverse(&zi) {
                        Err(FlowError::Coupling(CouplingError::NonFinite)) if attempt < MAX_LATENT_REDRAWS => {
                            attempt += 1;
                            zi.mapv_inplace(|_| StandardNormal.sample(&mut redraws));
                        }
                        Err(FlowError::Coupling(CouplingError::NonFinite)) => {
                            return Err(FlowError::LatentOverflow { row: lo + i })
                        }
                        other => break other?,
                    }
                };
                out.row_mut(i).assign(&x.row(0));
            }
            Ok(out)
        })
        .collect();
    let parts = parts?;
    if parts.is_empty() {
        return Ok(Array2::zeros((0, out_width)));
    }
    let views: Vec<_> = parts.iter().map(|c| c.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}

/// Adds the weighted padding penalty over the trailing `padding` columns.
fn pad_term(tape: &mut Tape, out: NodeId, width: usize, padding: usize, weight: f64) -> Option<NodeId> {
    if padding == 0 || weight == 0.0 {
        return None;
    }
    let tail = tape.columns(out, width - padding, padding);
    let sq = tape.square(tail);
    let m = tape.mean(sq);
    Some(tape.scale(m, weight))
}

fn finish(tape: &mut Tape, per_row: NodeId, logdet: Option<NodeId>, pad: Option<NodeId>) -> NodeId {
    let per_row = match logdet {
        Some(l) => tape.sub(per_row, l),
        None => per_row,
    };
    let loss = tape.mean(per_row);
    match pad {
        Some(p) => tape.add(loss, p),
        None => loss,
    }
}

/// Density model `x → z` with `d_z = d_x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub stack: InvertibleStack,
    pub pad_weight: f64,
}

impl FlowModel {
    pub fn new(data_width: usize, padding: usize, arch: &Architecture, seed: u64) -> Result<Self, FlowError> {
        Ok(Self {
            stack: InvertibleStack::new(&arch.stack_spec(data_width, padding, 0, seed))?,
            pad_weight: DEFAULT_PAD_WEIGHT,
        })
    }

    pub fn from_stack(stack: InvertibleStack) -> Self {
        Self {
            stack,
            pad_weight: DEFAULT_PAD_WEIGHT,
        }
    }

    pub fn data_width(&self) -> usize {
        self.stack.data_width()
    }

    /// `f(x)` (data coordinates only) and the per-row log-determinant.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Array1<f64>), FlowError> {
        check_width("x", x, self.data_width())?;
        let (o, l) = self.stack.forward_batch(x, None)?;
        Ok((o.slice(s![.., ..self.data_width()]).to_owned(), l))
    }

    /// Mean of `½‖f(x)‖² − logdet`, plus the padding penalty.
    pub fn nll(&self, x: &Matrix) -> Result<f64, FlowError> {
        check_width("x", x, self.data_width())?;
        let (o, l) = self.stack.forward_batch(x, None)?;
        let d = self.data_width();
        let per_row = sq_norms(o.slice(s![.., ..d])) * 0.5 - &l;
        Ok(per_row.mean().unwrap_or(0.0) + self.pad_weight * pad_penalty(&o, self.stack.padding))
    }

    /// `log p(x) = −½‖f(x)‖² − (d/2)·log 2π + logdet`, one value per row.
    pub fn log_density(&self, x: &Matrix) -> Result<Array1<f64>, FlowError> {
        let (z, l) = self.forward(x)?;
        let d = self.data_width() as f64;
        Ok(sq_norms(z.view()) * -0.5 - 0.5 * d * (2.0 * PI).ln() + l)
    }

    /// `n` samples `f⁻¹(z)` with `z ~ N(0, I)` from the seed's latent stream.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Matrix, FlowError> {
        check_finite(&self.stack)?;
        let w = self.stack.width;
        invert_latents(n, self.data_width(), self.data_width(), seed, |z| {
            let o = pad_input(z, w - z.ncols());
            Ok(self.stack.inverse_batch(&o, None)?.0)
        })
    }

    fn tape_loss(&self, tape: &mut Tape, vars: &StackVars) -> NodeId {
        let x = tape.input();
        let (out, logdet) = self.stack.forward_on_tape(tape, vars, x, None);
        let z = tape.columns(out, 0, self.data_width());
        let sq = tape.square(z);
        let per_row = tape.sum_cols(sq);
        let per_row = tape.scale(per_row, 0.5);
        let pad = pad_term(tape, out, self.stack.width, self.stack.padding, self.pad_weight);
        finish(tape, per_row, logdet, pad)
    }
}

/// Invertible symbolic regression `x → [y, z]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsrModel {
    pub stack: InvertibleStack,
    pub y_width: usize,
    pub sigma2: f64,
    pub pad_weight: f64,
}

impl IsrModel {
    pub fn new(
        x_width: usize,
        y_width: usize,
        padding: usize,
        sigma2: f64,
        arch: &Architecture,
        seed: u64,
    ) -> Result<Self, FlowError> {
        if y_width > x_width {
            return Err(FlowError::ObservationTooWide { x: x_width, y: y_width });
        }
        Self::from_stack(
            InvertibleStack::new(&arch.stack_spec(x_width, padding, 0, seed))?,
            y_width,
            sigma2,
        )
    }

    pub fn from_stack(stack: InvertibleStack, y_width: usize, sigma2: f64) -> Result<Self, FlowError> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(FlowError::InvalidSigma2(sigma2));
        }
        if y_width > stack.data_width() {
            return Err(FlowError::ObservationTooWide {
                x: stack.data_width(),
                y: y_width,
            });
        }
        Ok(Self {
            stack,
            y_width,
            sigma2,
            pad_weight: DEFAULT_PAD_WEIGHT,
        })
    }

    pub fn x_width(&self) -> usize {
        self.stack.data_width()
    }

    pub fn z_width(&self) -> usize {
        self.x_width() - self.y_width
    }

    /// `(f_y(x), f_z(x), logdet)` per row.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix, Array1<f64>), FlowError> {
        check_width("x", x, self.x_width())?;
        let (o, l) = self.stack.forward_batch(x, None)?;
        let dy = self.y_width;
        let y = o.slice(s![.., ..dy]).to_owned();
        let z = o.slice(s![.., dy..dy + self.z_width()]).to_owned();
        Ok((y, z, l))
    }

    /// `f⁻¹([y, z, 0])` with the padded slots set to zero.
    pub fn inverse(&self, y: &Matrix, z: &Matrix) -> Result<Matrix, FlowError> {
        check_width("y", y, self.y_width)?;
        check_width("z", z, self.z_width())?;
        if y.nrows() != z.nrows() {
            return Err(FlowError::RowMismatch {
                x: z.nrows(),
                y: y.nrows(),
            });
        }
        let o = pad_input(
            &concatenate(Axis(1), &[y.view(), z.view()]).expect("rows agree"),
            self.stack.padding,
        );
        Ok(self.stack.inverse_batch(&o, None)?.0)
    }

    /// Mean of `½‖f_y(x) − y‖²/σ² + ½‖f_z(x)‖² − logdet`, plus the padding
    /// penalty.
    pub fn nll(&self, x: &Matrix, y: &Matrix) -> Result<f64, FlowError> {
        check_width("x", x, self.x_width())?;
        check_width("y", y, self.y_width)?;
        let (o, l) = self.stack.forward_batch(x, None)?;
        let dy = self.y_width;
        let fit = sq_norms((&o.slice(s![.., ..dy]) - y).view()) * (0.5 / self.sigma2);
        let latent = sq_norms(o.slice(s![.., dy..dy + self.z_width()])) * 0.5;
        let per_row = fit + latent - &l;
        Ok(per_row.mean().unwrap_or(0.0) + self.pad_weight * pad_penalty(&o, self.stack.padding))
    }

    /// `n` posterior samples `f⁻¹([y*, z])` with `z ~ N(0, I)`.
    pub fn sample_posterior(&self, y_star: &[f64], n: usize, seed: u64) -> Result<Matrix, FlowError> {
        if y_star.len() != self.y_width {
            return Err(FlowError::Width {
                what: "y*",
                expected: self.y_width,
                got: y_star.len(),
            });
        }
        check_finite(&self.stack)?;
        let y_row = Array2::from_shape_vec((1, self.y_width), y_star.to_vec()).expect("row");
        invert_latents(n, self.z_width(), self.x_width(), seed, |z| {
            let y = y_row
                .broadcast((z.nrows(), self.y_width))
                .expect("broadcast")
                .to_owned();
            self.inverse(&y, z)
        })
    }

    fn tape_loss(&self, tape: &mut Tape, vars: &StackVars) -> NodeId {
        let x = tape.input();
        let y = tape.input();
        let (out, logdet) = self.stack.forward_on_tape(tape, vars, x, None);
        let fy = tape.columns(out, 0, self.y_width);
        let diff = tape.sub(fy, y);
        let sq = tape.square(diff);
        let fit = tape.sum_cols(sq);
        let fit = tape.scale(fit, 0.5 / self.sigma2);
        let fz = tape.columns(out, self.y_width, self.z_width());
        let sq = tape.square(fz);
        let latent = tape.sum_cols(sq);
        let latent = tape.scale(latent, 0.5);
        let per_row = tape.add(fit, latent);
        let pad = pad_term(tape, out, self.stack.width, self.stack.padding, self.pad_weight);
        finish(tape, per_row, logdet, pad)
    }
}

/// Conditional model `x → z` given `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CisrModel {
    pub stack: InvertibleStack,
    pub pad_weight: f64,
}

impl CisrModel {
    pub fn new(
        x_width: usize,
        y_width: usize,
        padding: usize,
        arch: &Architecture,
        seed: u64,
    ) -> Result<Self, FlowError> {
        Ok(Self::from_stack(InvertibleStack::new(
            &arch.stack_spec(x_width, padding, y_width, seed),
        )?))
    }

    pub fn from_stack(stack: InvertibleStack) -> Self {
        Self {
            stack,
            pad_weight: DEFAULT_PAD_WEIGHT,
        }
    }

    pub fn x_width(&self) -> usize {
        self.stack.data_width()
    }

    pub fn y_width(&self) -> usize {
        self.stack.condition_width
    }

    pub fn forward(&self, x: &Matrix, y: &Matrix) -> Result<(Matrix, Array1<f64>), FlowError> {
        check_width("x", x, self.x_width())?;
        check_width("y", y, self.y_width())?;
        let (o, l) = self.stack.forward_batch(x, Some(y))?;
        Ok((o.slice(s![.., ..self.x_width()]).to_owned(), l))
    }

    pub fn inverse(&self, z: &Matrix, y: &Matrix) -> Result<Matrix, FlowError> {
        check_width("z", z, self.x_width())?;
        check_width("y", y, self.y_width())?;
        let o = pad_input(z, self.stack.padding);
        Ok(self.stack.inverse_batch(&o, Some(y))?.0)
    }

    /// Mean of `½‖f(x; y)‖² − logdet`, plus the padding penalty.
    pub fn nll(&self, x: &Matrix, y: &Matrix) -> Result<f64, FlowError> {
        check_width("x", x, self.x_width())?;
        check_width("y", y, self.y_width())?;
        let (o, l) = self.stack.forward_batch(x, Some(y))?;
        let per_row = sq_norms(o.slice(s![.., ..self.x_width()])) * 0.5 - &l;
        Ok(per_row.mean().unwrap_or(0.0) + self.pad_weight * pad_penalty(&o, self.stack.padding))
    }

    pub fn sample_posterior(&self, y_star: &[f64], n: usize, seed: u64) -> Result<Matrix, FlowError> {
        if y_star.len() != self.y_width() {
            return Err(FlowError::Width {
                what: "y*",
                expected: self.y_width(),
                got: y_star.len(),
            });
        }
        check_finite(&self.stack)?;
        let y_row = Array2::from_shape_vec((1, y_star.len()), y_star.to_vec()).expect("row");
        invert_latents(n, self.x_width(), self.x_width(), seed, |z| {
            let y = y_row
                .broadcast((z.nrows(), y_row.ncols()))
                .expect("broadcast")
                .to_owned();
            self.inverse(z, &y)
        })
    }

    fn tape_loss(&self, tape: &mut Tape, vars: &StackVars) -> NodeId {
        let x = tape.input();
        let y = tape.input();
        let (out, logdet) = self.stack.forward_on_tape(tape, vars, x, Some(y));
        let z = tape.columns(out, 0, self.x_width());
        let sq = tape.square(z);
        let per_row = tape.sum_cols(sq);
        let per_row = tape.scale(per_row, 0.5);
        let pad = pad_term(tape, out, self.stack.width, self.stack.padding, self.pad_weight);
        finish(tape, per_row, logdet, pad)
    }
}

fn check_finite(stack: &InvertibleStack) -> Result<(), FlowError> {
    let mut ok = true;
    stack.for_each_param(&mut |_, m| ok &= m.iter().all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(FlowError::NonFiniteWeights)
    }
}

/// Any of the three variants, as stored in a model file and consumed by the
/// trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Model {
    Flow(FlowModel),
    Isr(IsrModel),
    Cisr(CisrModel),
}

/// Loss graph for one mini-batch: the tape, the stack's parameter handles,
/// the objective node, the bare NLL node (the same node unless a penalty
/// was added), and the inputs to bind.
pub struct LossGraph {
    pub tape: Tape,
    pub vars: StackVars,
    pub loss: NodeId,
    pub nll: NodeId,
    pub inputs: Vec<Matrix>,
}

impl Model {
    pub fn stack(&self) -> &InvertibleStack {
        match self {
            Model::Flow(m) => &m.stack,
            Model::Isr(m) => &m.stack,
            Model::Cisr(m) => &m.stack,
        }
    }

    pub fn stack_mut(&mut self) -> &mut InvertibleStack {
        match self {
            Model::Flow(m) => &mut m.stack,
            Model::Isr(m) => &mut m.stack,
            Model::Cisr(m) => &mut m.stack,
        }
    }

    pub fn needs_observations(&self) -> bool {
        !matches!(self, Model::Flow(_))
    }

    pub fn pad_weight(&self) -> f64 {
        match self {
            Model::Flow(m) => m.pad_weight,
            Model::Isr(m) => m.pad_weight,
            Model::Cisr(m) => m.pad_weight,
        }
    }

    pub fn set_pad_weight(&mut self, w: f64) {
        match self {
            Model::Flow(m) => m.pad_weight = w,
            Model::Isr(m) => m.pad_weight = w,
            Model::Cisr(m) => m.pad_weight = w,
        }
    }

    fn observations<'a>(&self, batch: &'a Dataset) -> Result<&'a Matrix, FlowError> {
        let y = batch.y.as_ref().ok_or(FlowError::MissingObservations)?;
        if y.nrows() != batch.x.nrows() {
            return Err(FlowError::RowMismatch {
                x: batch.x.nrows(),
                y: y.nrows(),
            });
        }
        Ok(y)
    }

    /// The variant's NLL on `batch`, evaluated without a tape.
    pub fn loss(&self, batch: &Dataset) -> Result<f64, FlowError> {
        match self {
            Model::Flow(m) => m.nll(&batch.x),
            Model::Isr(m) => m.nll(&batch.x, self.observations(batch)?),
            Model::Cisr(m) => m.nll(&batch.x, self.observations(batch)?),
        }
    }

    /// Records the variant's NLL for `batch` on a fresh tape.
    pub fn loss_graph(&self, batch: &Dataset) -> Result<LossGraph, FlowError> {
        let stack = self.stack();
        check_width("x", &batch.x, stack.data_width())?;
        let mut tape = Tape::new();
        let vars = stack.register(&mut tape);
        let x = pad_input(&batch.x, stack.padding);
        let (loss, inputs) = match self {
            Model::Flow(m) => (m.tape_loss(&mut tape, &vars), vec![x]),
            Model::Isr(m) => {
                let y = self.observations(batch)?;
                check_width("y", y, m.y_width)?;
                (m.tape_loss(&mut tape, &vars), vec![x, y.clone()])
            }
            Model::Cisr(m) => {
                let y = self.observations(batch)?;
                check_width("y", y, m.y_width())?;
                (m.tape_loss(&mut tape, &vars), vec![x, y.clone()])
            }
        };
        Ok(LossGraph {
            tape,
            vars,
            loss,
            nll: loss,
            inputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{CouplingBlock, Stage};
    use crate::eql::EqlNetwork;
    use ndarray::array;

    fn overflow_outside(limit: f64) -> impl Fn(&Matrix) -> Result<Matrix, FlowError> + Sync {
        move |z: &Matrix| {
            if z.iter().any(|v| v.abs() > limit) {
                Err(CouplingError::NonFinite.into())
            } else {
                Ok(z * 2.0)
            }
        }
    }

    #[test]
    fn overflowing_latents_are_redrawn_deterministically() {
        let n = 2 * SAMPLE_CHUNK + 7;
        let a = invert_latents(n, 2, 2, 5, overflow_outside(1.5)).unwrap();
        assert!(a.iter().all(|v| v.abs() <= 3.0));
        let z = gaussian_latents(n, 2, 5);
        for (zr, ar) in z.rows().into_iter().zip(a.rows()) {
            if zr.iter().all(|v| v.abs() <= 1.5) {
                assert_eq!(ar.to_owned(), &zr * 2.0);
            }
        }
        assert_eq!(a, invert_latents(n, 2, 2, 5, overflow_outside(1.5)).unwrap());
        assert!(matches!(
            invert_latents(3, 2, 2, 5, overflow_outside(0.0)),
            Err(FlowError::LatentOverflow { row: 0 })
        ));
    }

    fn arch(blocks: usize) -> Architecture {
        Architecture {
            blocks,
            hidden_layers: 1,
            library: ActivationLibrary::default(),
            clamp: 2.0,
        }
    }

    fn scale_by(factor: f64) -> InvertibleStack {
        // Width 1 with one pad slot: u₁ = x (first coordinate), s₁ constant.
        let mut b = CouplingBlock::identity(2, 0, 2.0);
        let raw = 2.0 * (factor.ln() / 2.0).atanh();
        b.s1 = EqlNetwork::linear(Array2::zeros((1, 1)), array![[raw]]);
        let mut stack = InvertibleStack::empty(2, 1, 0);
        stack.stages.push(Stage::Coupling(b));
        stack
    }

    #[test]
    fn flow_nll_examples() {
        let id = FlowModel::from_stack(InvertibleStack::empty(2, 0, 0));
        assert!((id.nll(&array![[1.0, 1.0]]).unwrap() - 1.0).abs() < 1e-15);

        let doubled = FlowModel::from_stack(scale_by(2.0));
        let expected = 0.5 * 4.0 - 2f64.ln();
        assert!((doubled.nll(&array![[1.0]]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.3069).abs() < 1e-4);
    }

    #[test]
    fn log_density_examples() {
        let id = FlowModel::from_stack(InvertibleStack::empty(2, 0, 0));
        let lp = id.log_density(&array![[0.0, 0.0]]).unwrap()[0];
        assert!((lp - -(2.0 * PI).ln()).abs() < 1e-15);
        assert!((lp - -1.8379).abs() < 1e-4);

        let mut stack = InvertibleStack::empty(2, 0, 0);
        let mut b = CouplingBlock::identity(2, 0, 2.0);
        let raw = 2.0 * (2f64.ln() / 2.0).atanh();
        b.s1 = EqlNetwork::linear(Array2::zeros((1, 1)), array![[raw]]);
        b.s2 = EqlNetwork::linear(Array2::zeros((1, 1)), array![[raw]]);
        stack.stages.push(Stage::Coupling(b));
        let lp = FlowModel::from_stack(stack).log_density(&array![[0.0, 0.0]]).unwrap()[0];
        assert!((lp - (-(2.0 * PI).ln() + 2.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gaussian_optimum_nll() {
        // The true whitening map of N([0,3], 0.1·I) attains ½(1 + ln 0.1) per
        // coordinate in expectation.
        let sd = 0.1f64.sqrt();
        let mut b = CouplingBlock::identity(2, 0, 2.0);
        let raw = 2.0 * (-sd.ln() / 2.0).atanh();
        b.s1 = EqlNetwork::linear(Array2::zeros((1, 1)), array![[raw]]);
        b.s2 = EqlNetwork::linear(Array2::zeros((1, 1)), array![[raw]]);
        b.t2 = EqlNetwork::linear(Array2::zeros((1, 1)), array![[-3.0 / sd]]);
        let mut stack = InvertibleStack::empty(2, 0, 0);
        stack.stages.push(Stage::Coupling(b));
        let model = FlowModel::from_stack(stack);

        let z = gaussian_latents(200_000, 2, 11);
        let x = z.mapv(|v| v * sd) + &array![[0.0, 3.0]];
        let nll = model.nll(&x).unwrap();
        let optimum = 1.0 + 0.1f64.ln();
        assert!((optimum - -1.3026).abs() < 1e-4);
        assert!((nll - optimum).abs() < 0.01, "{nll}");
    }

    #[test]
    fn isr_partition_and_inverse() {
        let m = IsrModel::from_stack(InvertibleStack::empty(3, 0, 0), 2, DEFAULT_SIGMA2).unwrap();
        let (y, z, l) = m.forward(&array![[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(y, array![[1.0, 2.0]]);
        assert_eq!(z, array![[3.0]]);
        assert_eq!(l[0], 0.0);
        assert_eq!(m.inverse(&y, &z).unwrap(), array![[1.0, 2.0, 3.0]]);

        assert_eq!(m.nll(&array![[1.0, 2.0, 0.0]], &array![[1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(m.nll(&array![[1.0, 2.0, 1.0]], &array![[1.0, 2.0]]).unwrap(), 0.5);
        assert!(IsrModel::from_stack(InvertibleStack::empty(3, 0, 0), 2, 0.0).is_err());
        assert!(IsrModel::from_stack(InvertibleStack::empty(1, 0, 0), 2, 1.0).is_err());
    }

    #[test]
    fn scalar_isr_is_padded() {
        let m = IsrModel::new(1, 1, 0, DEFAULT_SIGMA2, &arch(2), 3).unwrap();
        assert_eq!(m.stack.width, 2);
        assert_eq!(m.z_width(), 0);
        // The inverse zeroes the pad slot, so round trips go through the
        // full-width output.
        let x = array![[0.7], [-0.2]];
        let (o, _) = m.stack.forward_batch(&x, None).unwrap();
        let (back, _) = m.stack.inverse_batch(&o, None).unwrap();
        assert!((back - &x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_posterior_reproduces_latents() {
        let m = IsrModel::from_stack(InvertibleStack::empty(2, 0, 0), 1, DEFAULT_SIGMA2).unwrap();
        let s = m.sample_posterior(&[0.0], 3000, 9).unwrap();
        let z = gaussian_latents(3000, 1, 9);
        assert_eq!(s.column(0), Array1::<f64>::zeros(3000));
        assert_eq!(s.column(1), z.column(0));
        assert_eq!(m.sample_posterior(&[0.0], 3000, 9).unwrap(), s);
        assert!(m.sample_posterior(&[0.0, 1.0], 3, 9).is_err());
    }

    #[test]
    fn conditional_identity_loss() {
        let m = CisrModel::from_stack(InvertibleStack::empty(2, 0, 1));
        let x = array![[1.0, 2.0], [0.0, -1.0]];
        let y = array![[5.0], [-3.0]];
        assert!((m.nll(&x, &y).unwrap() - (2.5 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn tape_loss_matches_direct_evaluation() {
        let x = gaussian_latents(17, 3, 1);
        let y = gaussian_latents(17, 2, 2);
        let mut models = vec![
            Model::Flow(FlowModel::new(3, 1, &arch(2), 4).unwrap()),
            Model::Isr(IsrModel::new(3, 2, 0, 0.3, &arch(3), 5).unwrap()),
            Model::Cisr(CisrModel::new(3, 2, 1, &arch(2), 6).unwrap()),
        ];
        let mut rng = rng::stream(0, Purpose::Evaluation, 0);
        for m in &mut models {
            m.stack_mut().for_each_param_mut(&mut |_, p| {
                p.mapv_inplace(|_| rand::Rng::random_range(&mut rng, -0.4..0.4));
            });
            let batch = Dataset {
                x: x.clone(),
                y: m.needs_observations().then(|| y.clone()),
            };
            let mut g = m.loss_graph(&batch).unwrap();
            g.tape.forward_eval(&g.inputs).unwrap();
            let taped = g.tape.scalar(g.loss).unwrap();
            let direct = m.loss(&batch).unwrap();
            assert!(
                (taped - direct).abs() < 1e-12 * direct.abs().max(1.0),
                "{taped} vs {direct}"
            );
        }
    }

    #[test]
    fn model_serde_round_trip() {
        let m = Model::Isr(IsrModel::new(4, 2, 0, 0.01, &arch(2), 1).unwrap());
        let json = serde_json::to_string(&m).unwrap();
        let back: Model = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
