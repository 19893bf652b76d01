//! Affine coupling blocks with equation-learner subnetworks, fixed
//! permutations, zero padding, and log-determinant bookkeeping.
//!
//! A block splits its input `u = [u₁, u₂]` with `len(u₁) = ⌊d/2⌋` and maps
//!
//! ```text
//! v₁ = u₁ ⊙ exp(ŝ₁(u₂)) + t₁(u₂)      o₁ = v₁
//! o₂ = u₂ ⊙ exp(ŝ₂(v₁)) + t₂(v₁)
//! ```
//!
//! where `ŝ = C·tanh(s/C)` is the soft-clamped scale. The log-determinant is
//! `Σŝ₁ + Σŝ₂`. Conditional blocks append the condition `y` to every
//! subnetwork input.

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{soft_clamp, Matrix, NodeId, Tape};
use crate::eql::{ActivationLibrary, EqlError, EqlNetwork, EqlVars, ParamRole};
use crate::rng::{self, Purpose};

/// Default bound of the soft clamp applied to scale outputs.
pub const DEFAULT_CLAMP: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("expected width {expected}, got {got}")]
    Width { expected: usize, got: usize },
    #[error("expected condition width {expected}, got {got}")]
    ConditionWidth { expected: usize, got: usize },
    #[error("non-finite output")]
    NonFinite,
    #[error("clamp bound must be positive, got {0}")]
    InvalidClamp(f64),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error(transparent)]
    Eql(#[from] EqlError),
}

/// Counts subnetwork evaluations, for checking that both directions cost
/// the same.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalTrace {
    pub subnet_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingBlock {
    pub width: usize,
    pub condition_width: usize,
    pub clamp: f64,
    pub s1: EqlNetwork,
    pub t1: EqlNetwork,
    pub s2: EqlNetwork,
    pub t2: EqlNetwork,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    s1: EqlVars,
    t1: EqlVars,
    s2: EqlVars,
    t2: EqlVars,
}

impl BlockVars {
    pub fn subnets(&self) -> [&EqlVars; 4] {
        [&self.s1, &self.t1, &self.s2, &self.t2]
    }
}

/// Split sizes `(⌊d/2⌋, d − ⌊d/2⌋)`.
pub fn split_sizes(width: usize) -> (usize, usize) {
    (width / 2, width - width / 2)
}

fn cat(a: &Matrix, cond: Option<&Matrix>) -> Matrix {
    match cond {
        Some(c) if c.ncols() > 0 => concatenate(Axis(1), &[a.view(), c.view()]).expect("rows agree"),
        _ => a.clone(),
    }
}

impl CouplingBlock {
    pub fn new<R: rand::Rng + ?Sized>(
        width: usize,
        condition_width: usize,
        hidden_layers: usize,
        library: &ActivationLibrary,
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self, CouplingError> {
        if !(clamp > 0.0 && clamp.is_finite()) {
            return Err(CouplingError::InvalidClamp(clamp));
        }
        let (d1, d2) = split_sizes(width);
        let c = condition_width;
        Ok(Self {
            width,
            condition_width,
            clamp,
            s1: EqlNetwork::new(d2 + c, d1, hidden_layers, library, rng),
            t1: EqlNetwork::new(d2 + c, d1, hidden_layers, library, rng),
            s2: EqlNetwork::new(d1 + c, d2, hidden_layers, library, rng),
            t2: EqlNetwork::new(d1 + c, d2, hidden_layers, library, rng),
        })
    }

    /// Block whose subnetworks are all zero linear maps.
    pub fn identity(width: usize, condition_width: usize, clamp: f64) -> Self {
        let (d1, d2) = split_sizes(width);
        let c = condition_width;
        let zero = |i: usize, o: usize| EqlNetwork::linear(Array2::zeros((i, o)), Array2::zeros((1, o)));
        Self {
            width,
            condition_width,
            clamp,
            s1: zero(d2 + c, d1),
            t1: zero(d2 + c, d1),
            s2: zero(d1 + c, d2),
            t2: zero(d1 + c, d2),
        }
    }

    pub fn split(&self) -> (usize, usize) {
        split_sizes(self.width)
    }

    pub fn subnets(&self) -> [&EqlNetwork; 4] {
        [&self.s1, &self.t1, &self.s2, &self.t2]
    }

    pub fn subnets_mut(&mut self) -> [&mut EqlNetwork; 4] {
        [&mut self.s1, &mut self.t1, &mut self.s2, &mut self.t2]
    }

    fn check(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<(), CouplingError> {
        if x.ncols() != self.width {
            return Err(CouplingError::Width {
                expected: self.width,
                got: x.ncols(),
            });
        }
        let got = cond.map(|c| c.ncols()).unwrap_or(0);
        if got != self.condition_width {
            return Err(CouplingError::ConditionWidth {
                expected: self.condition_width,
                got,
            });
        }
        Ok(())
    }

    fn eval(&self, net: &EqlNetwork, input: &Matrix, trace: &mut EvalTrace) -> Result<Matrix, CouplingError> {
        trace.subnet_calls += 1;
        Ok(net.forward_batch(input)?)
    }

    /// Forward map of a single vector: `(o, logdet)`.
    pub fn forward(&self, u: &[f64]) -> Result<(Vec<f64>, f64), CouplingError> {
        let u = Array2::from_shape_vec((1, u.len()), u.to_vec()).expect("row");
        let (o, logdet) = self.forward_batch(&u, None, &mut EvalTrace::default())?;
        Ok((o.into_raw_vec_and_offset().0, logdet[0]))
    }

    pub fn inverse(&self, o: &[f64]) -> Result<Vec<f64>, CouplingError> {
        let o = Array2::from_shape_vec((1, o.len()), o.to_vec()).expect("row");
        let (u, _) = self.inverse_batch(&o, None, &mut EvalTrace::default())?;
        Ok(u.into_raw_vec_and_offset().0)
    }

    /// Row-wise forward map. Returns the outputs and per-row log-determinants.
    pub fn forward_batch(
        &self,
        u: &Matrix,
        cond: Option<&Matrix>,
        trace: &mut EvalTrace,
    ) -> Result<(Matrix, Array1<f64>), CouplingError> {
        self.check(u, cond)?;
        let (d1, _) = self.split();
        let u1 = u.slice(s![.., ..d1]);
        let u2 = u.slice(s![.., d1..]).to_owned();

        let in1 = cat(&u2, cond);
        let s1 = self.eval(&self.s1, &in1, trace)?.mapv(|v| soft_clamp(v, self.clamp));
        let t1 = self.eval(&self.t1, &in1, trace)?;
        let v1 = Zip::from(&u1)
            .and(&s1)
            .and(&t1)
            .map_collect(|&u, &s, &t| u * s.exp() + t);

        let in2 = cat(&v1, cond);
        let s2 = self.eval(&self.s2, &in2, trace)?.mapv(|v| soft_clamp(v, self.clamp));
        let t2 = self.eval(&self.t2, &in2, trace)?;
        let o2 = Zip::from(&u2)
            .and(&s2)
            .and(&t2)
            .map_collect(|&u, &s, &t| u * s.exp() + t);

        let logdet = s1.sum_axis(Axis(1)) + s2.sum_axis(Axis(1));
        let o = concatenate(Axis(1), &[v1.view(), o2.view()]).expect("rows agree");
        if !o.iter().chain(logdet.iter()).all(|v| v.is_finite()) {
            return Err(CouplingError::NonFinite);
        }
        Ok((o, logdet))
    }

    /// Row-wise inverse map. Returns the inputs and the per-row
    /// log-determinant of the forward map at those inputs.
    pub fn inverse_batch(
        &self,
        o: &Matrix,
        cond: Option<&Matrix>,
        trace: &mut EvalTrace,
    ) -> Result<(Matrix, Array1<f64>), CouplingError> {
        self.check(o, cond)?;
        let (d1, _) = self.split();
        let o1 = o.slice(s![.., ..d1]).to_owned();
        let o2 = o.slice(s![.., d1..]);

        let in2 = cat(&o1, cond);
        let s2 = self.eval(&self.s2, &in2, trace)?.mapv(|v| soft_clamp(v, self.clamp));
        let t2 = self.eval(&self.t2, &in2, trace)?;
        let u2 = Zip::from(&o2)
            .and(&s2)
            .and(&t2)
            .map_collect(|&o, &s, &t| (o - t) * (-s).exp());

        let in1 = cat(&u2, cond);
        let s1 = self.eval(&self.s1, &in1, trace)?.mapv(|v| soft_clamp(v, self.clamp));
        let t1 = self.eval(&self.t1, &in1, trace)?;
        let u1 = Zip::from(&o1)
            .and(&s1)
            .and(&t1)
            .map_collect(|&o, &s, &t| (o - t) * (-s).exp());

        let logdet = s1.sum_axis(Axis(1)) + s2.sum_axis(Axis(1));
        let u = concatenate(Axis(1), &[u1.view(), u2.view()]).expect("rows agree");
        if !u.iter().all(|v| v.is_finite()) {
            return Err(CouplingError::NonFinite);
        }
        Ok((u, logdet))
    }

    pub fn register(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            s1: self.s1.register(tape),
            t1: self.t1.register(tape),
            s2: self.s2.register(tape),
            t2: self.t2.register(tape),
        }
    }

    /// Records the forward map; returns `(o, logdet)` with `logdet` an
    /// `n × 1` column.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BlockVars,
        u: NodeId,
        cond: Option<NodeId>,
    ) -> (NodeId, NodeId) {
        let (d1, d2) = self.split();
        let with_cond = |tape: &mut Tape, a: NodeId| match cond {
            Some(c) if self.condition_width > 0 => tape.concat(&[a, c]),
            _ => a,
        };
        let u1 = tape.columns(u, 0, d1);
        let u2 = tape.columns(u, d1, d2);

        let in1 = with_cond(tape, u2);
        let s1 = self.s1.forward_on_tape(tape, &vars.s1, in1);
        let s1 = tape.soft_clamp(s1, self.clamp);
        let t1 = self.t1.forward_on_tape(tape, &vars.t1, in1);
        let e1 = tape.exp(s1);
        let v1 = tape.mul(u1, e1);
        let v1 = tape.add(v1, t1);

        let in2 = with_cond(tape, v1);
        let s2 = self.s2.forward_on_tape(tape, &vars.s2, in2);
        let s2 = tape.soft_clamp(s2, self.clamp);
        let t2 = self.t2.forward_on_tape(tape, &vars.t2, in2);
        let e2 = tape.exp(s2);
        let o2 = tape.mul(u2, e2);
        let o2 = tape.add(o2, t2);

        let out = tape.concat(&[v1, o2]);
        let l1 = tape.sum_cols(s1);
        let l2 = tape.sum_cols(s2);
        let logdet = tape.add(l1, l2);
        (out, logdet)
    }
}

/// Fixed permutation: output coordinate `j` is input coordinate `perm[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PermutationLayer {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl PermutationLayer {
    pub fn new(perm: Vec<usize>) -> Result<Self, CouplingError> {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (j, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(CouplingError::InvalidPermutation(format!("{perm:?}")));
            }
            inverse[p] = j;
        }
        Ok(Self { perm, inverse })
    }

    pub fn identity(width: usize) -> Self {
        Self::new((0..width).collect()).expect("identity is a bijection")
    }

    /// Uniformly random permutation drawn from the `(seed, index)` stream.
    pub fn seeded(width: usize, seed: u64, index: u64) -> Self {
        let mut perm: Vec<usize> = (0..width).collect();
        perm.shuffle(&mut rng::stream(seed, Purpose::Permutation, index));
        Self::new(perm).expect("shuffle is a bijection")
    }

    pub fn width(&self) -> usize {
        self.perm.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_indices(&self) -> &[usize] {
        &self.inverse
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.select(Axis(1), &self.perm)
    }

    pub fn apply_inverse(&self, x: &Matrix) -> Matrix {
        x.select(Axis(1), &self.inverse)
    }
}

impl TryFrom<Vec<usize>> for PermutationLayer {
    type Error = CouplingError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<PermutationLayer> for Vec<usize> {
    fn from(p: PermutationLayer) -> Self {
        p.perm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coupling(CouplingBlock),
    Permutation(PermutationLayer),
}

/// Appends `pad_count` zero columns.
pub fn pad_input(x: &Matrix, pad_count: usize) -> Matrix {
    if pad_count == 0 {
        return x.clone();
    }
    let zeros = Array2::zeros((x.nrows(), pad_count));
    concatenate(Axis(1), &[x.view(), zeros.view()]).expect("rows agree")
}

/// Mean squared value of the trailing `pad_count` columns of `outputs`.
pub fn pad_penalty(outputs: &Matrix, pad_count: usize) -> f64 {
    if pad_count == 0 || outputs.nrows() == 0 {
        return 0.0;
    }
    let tail = outputs.slice(s![.., outputs.ncols() - pad_count..]);
    tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64
}

/// Architecture of an [`InvertibleStack`].
#[derive(Clone, Debug)]
pub struct StackSpec {
    pub data_width: usize,
    pub padding: usize,
    pub condition_width: usize,
    pub blocks: usize,
    pub hidden_layers: usize,
    pub library: ActivationLibrary,
    pub clamp: f64,
    pub seed: u64,
}

/// Coupling blocks interleaved with fixed permutations, over `width`
/// coordinates of which the trailing `padding` are zero-padded slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertibleStack {
    pub width: usize,
    pub padding: usize,
    pub condition_width: usize,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
pub struct StackVars {
    blocks: Vec<Option<BlockVars>>,
}

impl StackVars {
    pub fn blocks(&self) -> impl Iterator<Item = &BlockVars> {
        self.blocks.iter().flatten()
    }
}

impl InvertibleStack {
    /// Stack with no stages (the identity map).
    pub fn empty(width: usize, padding: usize, condition_width: usize) -> Self {
        Self {
            width,
            padding,
            condition_width,
            stages: Vec::new(),
        }
    }

    /// `block₁, perm₁, block₂, …, blockₙ` with weights from the init stream
    /// and permutation `k` from the `(seed, k)` permutation stream.
    pub fn new(spec: &StackSpec) -> Result<Self, CouplingError> {
        let width = spec.data_width + spec.padding;
        let mut init = rng::stream(spec.seed, Purpose::Init, 0);
        let mut stages = Vec::new();
        for k in 0..spec.blocks {
            if k > 0 {
                stages.push(Stage::Permutation(PermutationLayer::seeded(width, spec.seed, k as u64)));
            }
            stages.push(Stage::Coupling(CouplingBlock::new(
                width,
                spec.condition_width,
                spec.hidden_layers,
                &spec.library,
                spec.clamp,
                &mut init,
            )?));
        }
        Ok(Self {
            width,
            padding: spec.padding,
            condition_width: spec.condition_width,
            stages,
        })
    }

    pub fn data_width(&self) -> usize {
        self.width - self.padding
    }

    pub fn blocks(&self) -> impl Iterator<Item = &CouplingBlock> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Coupling(b) => Some(b),
            Stage::Permutation(_) => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut CouplingBlock> {
        self.stages.iter_mut().filter_map(|s| match s {
            Stage::Coupling(b) => Some(b),
            Stage::Permutation(_) => None,
        })
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(ParamRole, &Matrix)) {
        for block in self.blocks() {
            for net in block.subnets() {
                net.for_each_param(f);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(ParamRole, &mut Matrix)) {
        for block in self.blocks_mut() {
            for net in block.subnets_mut() {
                net.for_each_param_mut(f);
            }
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<(), CouplingError> {
        if x.ncols() != self.data_width() {
            return Err(CouplingError::Width {
                expected: self.data_width(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Pads `x` (`n × data_width`) and runs every stage. Returns the
    /// full-width output and the per-row log-determinant.
    pub fn forward_batch(&self, x: &Matrix, cond: Option<&Matrix>) -> Result<(Matrix, Array1<f64>), CouplingError> {
        self.forward_batch_traced(x, cond, &mut EvalTrace::default())
    }

    pub fn forward_batch_traced(
        &self,
        x: &Matrix,
        cond: Option<&Matrix>,
        trace: &mut EvalTrace,
    ) -> Result<(Matrix, Array1<f64>), CouplingError> {
        self.check_input(x)?;
        let mut h = pad_input(x, self.padding);
        let mut logdet = Array1::zeros(x.nrows());
        for stage in &self.stages {
            match stage {
                Stage::Coupling(b) => {
                    let (o, l) = b.forward_batch(&h, cond, trace)?;
                    h = o;
                    logdet += &l;
                }
                Stage::Permutation(p) => h = p.apply(&h),
            }
        }
        Ok((h, logdet))
    }

    /// Exact reverse composition. Returns the unpadded inputs (the padded
    /// slots are dropped) and the forward log-determinant at them.
    pub fn inverse_batch(&self, o: &Matrix, cond: Option<&Matrix>) -> Result<(Matrix, Array1<f64>), CouplingError> {
        self.inverse_batch_traced(o, cond, &mut EvalTrace::default())
    }

    pub fn inverse_batch_traced(
        &self,
        o: &Matrix,
        cond: Option<&Matrix>,
        trace: &mut EvalTrace,
    ) -> Result<(Matrix, Array1<f64>), CouplingError> {
        if o.ncols() != self.width {
            return Err(CouplingError::Width {
                expected: self.width,
                got: o.ncols(),
            });
        }
        let mut h = o.clone();
        let mut logdet = Array1::zeros(o.nrows());
        for stage in self.stages.iter().rev() {
            match stage {
                Stage::Coupling(b) => {
                    let (u, l) = b.inverse_batch(&h, cond, trace)?;
                    h = u;
                    logdet += &l;
                }
                Stage::Permutation(p) => h = p.apply_inverse(&h),
            }
        }
        Ok((h.slice(s![.., ..self.data_width()]).to_owned(), logdet))
    }

    /// Single-vector forward map: `(output, logdet)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), CouplingError> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let (o, l) = self.forward_batch(&x, None)?;
        Ok((o.into_raw_vec_and_offset().0, l[0]))
    }

    pub fn inverse(&self, o: &[f64]) -> Result<Vec<f64>, CouplingError> {
        let o = Array2::from_shape_vec((1, o.len()), o.to_vec()).expect("row");
        let (x, _) = self.inverse_batch(&o, None)?;
        Ok(x.into_raw_vec_and_offset().0)
    }

    pub fn register(&self, tape: &mut Tape) -> StackVars {
        StackVars {
            blocks: self
                .stages
                .iter()
                .map(|s| match s {
                    Stage::Coupling(b) => Some(b.register(tape)),
                    Stage::Permutation(_) => None,
                })
                .collect(),
        }
    }

    /// Records the stage sequence applied to an already padded input node.
    /// The log-determinant is `None` for a stack without coupling blocks.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &StackVars,
        padded: NodeId,
        cond: Option<NodeId>,
    ) -> (NodeId, Option<NodeId>) {
        let mut h = padded;
        let mut logdet: Option<NodeId> = None;
        for (stage, v) in self.stages.iter().zip(&vars.blocks) {
            match (stage, v) {
                (Stage::Coupling(b), Some(v)) => {
                    let (o, l) = b.forward_on_tape(tape, v, h, cond);
                    h = o;
                    logdet = Some(match logdet {
                        Some(acc) => tape.add(acc, l),
                        None => l,
                    });
                }
                (Stage::Permutation(p), _) => h = tape.select(h, Arc::from(p.indices())),
                (Stage::Coupling(_), None) => unreachable!("vars registered from this stack"),
            }
        }
        (h, logdet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eql::Dense;
    use ndarray::array;

    fn constant_net(input: usize, value: f64) -> EqlNetwork {
        EqlNetwork::linear(Array2::zeros((input, 1)), Array2::from_elem((1, 1), value))
    }

    /// Block with constant subnetworks whose clamped scales equal `s1`, `s2`.
    pub(crate) fn constant_block(s1: f64, t1: f64, s2: f64, t2: f64) -> CouplingBlock {
        let c = DEFAULT_CLAMP;
        let raw = |s: f64| c * (s / c).atanh();
        CouplingBlock {
            width: 2,
            condition_width: 0,
            clamp: c,
            s1: constant_net(1, raw(s1)),
            t1: constant_net(1, t1),
            s2: constant_net(1, raw(s2)),
            t2: constant_net(1, t2),
        }
    }

    #[test]
    fn identity_block_is_identity() {
        let b = CouplingBlock::identity(3, 0, 2.0);
        let (o, l) = b.forward(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(o, vec![0.5, -1.0, 2.0]);
        assert_eq!(l, 0.0);
        assert_eq!(b.inverse(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn constant_block_values() {
        let b = constant_block(1.16, 0.0, 1.14, -9.39);
        let (o, l) = b.forward(&[0.0, 3.0]).unwrap();
        assert!(o[0].abs() < 1e-15);
        assert!((o[1] - (3.0 * 1.14f64.exp() - 9.39)).abs() < 1e-12);
        assert!((o[1] - (-0.0097)).abs() < 5e-4);
        assert!((l - 2.30).abs() < 1e-12);

        let u = b.inverse(&[0.0, 0.0]).unwrap();
        assert!(u[0].abs() < 1e-15);
        assert!((u[1] - 9.39 * (-1.14f64).exp()).abs() < 1e-12);
        assert!((u[1] - 3.003).abs() < 1e-3);
    }

    #[test]
    fn width_mismatch() {
        let b = CouplingBlock::identity(2, 0, 2.0);
        assert_eq!(b.forward(&[1.0]), Err(CouplingError::Width { expected: 2, got: 1 }));
        assert!(CouplingBlock::new(2, 0, 1, &ActivationLibrary::default(), 0.0, &mut rand::rng()).is_err());
    }

    #[test]
    fn scalar_width_block_uses_constant_subnets() {
        // d = 1: u₁ is empty, so s₂ and t₂ are functions of nothing.
        let mut b = CouplingBlock::identity(1, 0, 2.0);
        b.s2 = EqlNetwork::linear(Array2::zeros((0, 1)), array![[2.0 * (2f64.ln() / 2.0).atanh()]]);
        let (o, l) = b.forward(&[1.0]).unwrap();
        assert!((o[0] - 2.0).abs() < 1e-12);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn permutation_round_trip() {
        let p = PermutationLayer::seeded(6, 42, 1);
        let x = Array2::from_shape_fn((3, 6), |(i, j)| (i * 10 + j) as f64);
        assert_eq!(p.apply_inverse(&p.apply(&x)), x);
        assert!(PermutationLayer::new(vec![0, 0, 1]).is_err());
        assert!(PermutationLayer::new(vec![0, 3]).is_err());
        assert_eq!(PermutationLayer::seeded(6, 42, 1), p);
    }

    #[test]
    fn permutation_only_stack() {
        let p = PermutationLayer::new(vec![2, 0, 1]).unwrap();
        let mut stack = InvertibleStack::empty(3, 0, 0);
        stack.stages.push(Stage::Permutation(p));
        let (o, l) = stack.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(o, vec![3.0, 1.0, 2.0]);
        assert_eq!(l, 0.0);
        assert_eq!(stack.inverse(&[3.0, 1.0, 2.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn empty_stack_is_identity() {
        let stack = InvertibleStack::empty(2, 0, 0);
        assert_eq!(stack.forward(&[1.5, -2.0]).unwrap(), (vec![1.5, -2.0], 0.0));
    }

    #[test]
    fn padding_helpers() {
        let x = array![[1.0], [2.0]];
        assert_eq!(pad_input(&x, 0), x);
        assert_eq!(pad_input(&x, 1), array![[1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(pad_penalty(&array![[1.0, 0.0], [2.0, 0.0]], 1), 0.0);
        assert_eq!(pad_penalty(&array![[1.0, 1.0], [2.0, 3.0]], 1), 5.0);
    }

    #[test]
    fn one_block_stack_equals_block() {
        let spec = StackSpec {
            data_width: 2,
            padding: 0,
            condition_width: 0,
            blocks: 1,
            hidden_layers: 1,
            library: ActivationLibrary::default(),
            clamp: 2.0,
            seed: 5,
        };
        let mut stack = InvertibleStack::new(&spec).unwrap();
        for b in stack.blocks_mut() {
            b.s1.readout = Dense {
                weight: Array2::from_elem((13, 1), 0.1),
                bias: array![[0.2]],
            };
            b.t2.readout = Dense {
                weight: Array2::from_elem((13, 1), -0.1),
                bias: array![[0.3]],
            };
        }
        let block = stack.blocks().next().unwrap().clone();
        let x = [0.4, -0.8];
        assert_eq!(stack.forward(&x).unwrap(), block.forward(&x).unwrap());
    }
}
