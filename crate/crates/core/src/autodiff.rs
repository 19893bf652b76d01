//! Reverse-mode differentiation over batched matrix values.
//!
//! A [`Tape`] is built first and evaluated afterwards: the builder methods
//! only append operation records, [`Tape::forward_eval`] binds the inputs and
//! caches every primal, and [`Tape::backward`] propagates adjoints from a
//! scalar loss node back to the registered parameters.
//!
//! Every node holds a `rows × cols` matrix. Model code uses the row axis for
//! batch samples, so a whole mini-batch flows through one tape. Nodes are
//! appended in topological order by construction: an operation can only
//! reference nodes that already exist.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use thiserror::Error;

use crate::eql::{self, Activation};

/// Dense row-major matrix used for every value on the tape.
pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registration index of a parameter leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("input slot {0} is unbound")]
    UnboundInput(usize),
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("loss node {node} has shape {rows}x{cols}, expected 1x1")]
    NotScalar { node: usize, rows: usize, cols: usize },
    #[error("backward called before forward evaluation")]
    NotEvaluated,
}

#[derive(Clone, Debug)]
enum Op {
    Input(usize),
    Param(usize),
    Const(Matrix),
    MatMul(NodeId, NodeId),
    /// `a + row` with a `1 × cols` row broadcast over every row of `a`.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Square(NodeId),
    SinScaled(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftClamp(NodeId, f64),
    HardClamp(NodeId, f64),
    SmoothL05(NodeId, f64),
    Activate(NodeId, Arc<[Activation]>),
    Columns(NodeId, usize, usize),
    Concat(Vec<NodeId>),
    Select(NodeId, Arc<[usize]>),
    SumCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Square(_) => "square",
            Op::SinScaled(_) => "sin_2pi",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::SoftClamp(..) => "soft_clamp",
            Op::HardClamp(..) => "hard_clamp",
            Op::SmoothL05(..) => "smooth_l05",
            Op::Activate(..) => "eql_activate",
            Op::Columns(..) => "columns",
            Op::Concat(_) => "concat",
            Op::Select(..) => "select",
            Op::SumCols(_) => "sum_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Square(a)
            | Op::SinScaled(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SoftClamp(a, _)
            | Op::HardClamp(a, _)
            | Op::SmoothL05(a, _)
            | Op::Activate(a, _)
            | Op::Columns(a, _, _)
            | Op::Select(a, _)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    needs_grad: bool,
}

/// Append-only computation graph with cached primal values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Option<Matrix>>,
    param_values: Vec<Matrix>,
    param_nodes: Vec<NodeId>,
    input_count: usize,
    bound: Vec<Matrix>,
    outputs: Vec<NodeId>,
    evaluated: bool,
}

/// Gradient of a scalar loss with respect to every registered parameter, in
/// registration order. Parameters the loss does not reach get zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    grads: Vec<Matrix>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.grads.iter()
    }

    pub fn into_vec(self) -> Vec<Matrix> {
        self.grads
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Param(_) => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { op, needs_grad });
        self.values.push(None);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    /// Declares the next input slot. Slots are bound positionally by
    /// [`Tape::forward_eval`].
    pub fn input(&mut self) -> NodeId {
        let slot = self.input_count;
        self.input_count += 1;
        self.push(Op::Input(slot))
    }

    /// Registers a trainable parameter leaf holding `value`.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        let idx = self.param_values.len();
        self.param_values.push(value);
        let node = self.push(Op::Param(idx));
        self.param_nodes.push(node);
        node
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn param_count(&self) -> usize {
        self.param_values.len()
    }

    /// Leaf node holding parameter `id`.
    pub fn param_node(&self, id: ParamId) -> NodeId {
        self.param_nodes[id.0]
    }

    pub fn param_value(&self, id: ParamId) -> &Matrix {
        &self.param_values[id.0]
    }

    /// Replaces a parameter value. Cached primals become stale until the next
    /// [`Tape::forward_eval`].
    pub fn set_param(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(
            self.param_values[id.0].dim(),
            value.dim(),
            "parameter {} changed shape",
            id.0
        );
        self.param_values[id.0] = value;
        self.evaluated = false;
    }

    pub fn declare_output(&mut self, node: NodeId) {
        self.outputs.push(node);
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.push(Op::Offset(a, shift))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    /// `sin(2π·a)`.
    pub fn sin_scaled(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SinScaled(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    /// Unclamped `exp`; model code goes through [`Tape::soft_clamp`] or
    /// [`Tape::hard_clamp`] first.
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    /// `c·tanh(a/c)`: smooth, odd, bounded by `±c`.
    pub fn soft_clamp(&mut self, a: NodeId, bound: f64) -> NodeId {
        self.push(Op::SoftClamp(a, bound))
    }

    /// `clamp(a, -c, c)` with zero derivative outside the band.
    pub fn hard_clamp(&mut self, a: NodeId, bound: f64) -> NodeId {
        self.push(Op::HardClamp(a, bound))
    }

    /// Elementwise smoothed `|w|^{1/2}` with smoothing threshold `a`.
    pub fn smooth_l05(&mut self, w: NodeId, threshold: f64) -> NodeId {
        self.push(Op::SmoothL05(w, threshold))
    }

    /// Applies an equation-learner activation list to the pre-activation
    /// columns of `g`.
    pub fn activate(&mut self, g: NodeId, activations: Arc<[Activation]>) -> NodeId {
        self.push(Op::Activate(g, activations))
    }

    pub fn columns(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Columns(a, start, len))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Output column `j` is input column `indices[j]`.
    pub fn select(&mut self, a: NodeId, indices: Arc<[usize]>) -> NodeId {
        self.push(Op::Select(a, indices))
    }

    /// Row sums as an `n × 1` column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumCols(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    /// Cached primal of `node`; `None` before evaluation.
    pub fn value(&self, node: NodeId) -> Option<&Matrix> {
        if !self.evaluated {
            return None;
        }
        self.values[node.0].as_ref()
    }

    /// Scalar convenience for `1 × 1` nodes.
    pub fn scalar(&self, node: NodeId) -> Option<f64> {
        self.value(node).and_then(|m| (m.dim() == (1, 1)).then(|| m[[0, 0]]))
    }

    /// Binds `inputs` to the declared input slots in order and evaluates every
    /// node. Returns the declared outputs in declaration order.
    pub fn forward_eval(&mut self, inputs: &[Matrix]) -> Result<Vec<Matrix>, TapeError> {
        if inputs.len() < self.input_count {
            return Err(TapeError::UnboundInput(inputs.len()));
        }
        self.bound = inputs[..self.input_count].to_vec();
        self.reevaluate()?;
        Ok(self
            .outputs
            .iter()
            .map(|o| self.values[o.0].clone().expect("evaluated"))
            .collect())
    }

    fn reevaluate(&mut self) -> Result<(), TapeError> {
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i)?;
            if !value.iter().all(|v| v.is_finite()) {
                return Err(TapeError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    fn v(&self, id: NodeId) -> &Matrix {
        self.values[id.0].as_ref().expect("parents precede children")
    }

    fn shape_err(&self, node: usize, detail: String) -> TapeError {
        TapeError::Shape {
            node,
            op: self.nodes[node].op.name(),
            detail,
        }
    }

    fn same_shape(&self, node: usize, a: &Matrix, b: &Matrix) -> Result<(), TapeError> {
        if a.dim() != b.dim() {
            return Err(self.shape_err(node, format!("{:?} vs {:?}", a.dim(), b.dim())));
        }
        Ok(())
    }

    fn eval_node(&self, i: usize) -> Result<Matrix, TapeError> {
        let out = match &self.nodes[i].op {
            Op::Input(slot) => self.bound.get(*slot).cloned().ok_or(TapeError::UnboundInput(*slot))?,
            Op::Param(p) => self.param_values[*p].clone(),
            Op::Const(m) => m.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                if a.ncols() != b.nrows() {
                    return Err(self.shape_err(i, format!("{:?} · {:?}", a.dim(), b.dim())));
                }
                a.dot(b)
            }
            Op::AddRow(a, r) => {
                let (a, r) = (self.v(*a), self.v(*r));
                if r.nrows() != 1 || r.ncols() != a.ncols() {
                    return Err(self.shape_err(i, format!("{:?} + row {:?}", a.dim(), r.dim())));
                }
                a + r
            }
            Op::Add(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                self.same_shape(i, a, b)?;
                a + b
            }
            Op::Sub(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                self.same_shape(i, a, b)?;
                a - b
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                self.same_shape(i, a, b)?;
                a * b
            }
            Op::Scale(a, c) => self.v(*a) * *c,
            Op::Offset(a, c) => self.v(*a) + *c,
            Op::Square(a) => self.v(*a).mapv(|x| x * x),
            Op::SinScaled(a) => self.v(*a).mapv(|x| (std::f64::consts::TAU * x).sin()),
            Op::Sigmoid(a) => self.v(*a).mapv(sigmoid),
            Op::Exp(a) => self.v(*a).mapv(f64::exp),
            Op::Log(a) => self.v(*a).mapv(f64::ln),
            Op::SoftClamp(a, c) => self.v(*a).mapv(|x| soft_clamp(x, *c)),
            Op::HardClamp(a, c) => self.v(*a).mapv(|x| x.clamp(-*c, *c)),
            Op::SmoothL05(a, t) => self.v(*a).mapv(|w| smooth_l05(w, *t)),
            Op::Activate(g, acts) => {
                let g = self.v(*g);
                let width = eql::pre_activation_width(acts);
                if g.ncols() != width {
                    return Err(self.shape_err(i, format!("{} columns, activations need {width}", g.ncols())));
                }
                eql::activate(g, acts)
            }
            Op::Columns(a, start, len) => {
                let a = self.v(*a);
                if start + len > a.ncols() {
                    return Err(self.shape_err(i, format!("columns {start}..{} of {}", start + len, a.ncols())));
                }
                a.slice(s![.., *start..start + len]).to_owned()
            }
            Op::Concat(parts) => {
                let rows = parts.first().map(|p| self.v(*p).nrows()).unwrap_or(0);
                if parts.iter().any(|p| self.v(*p).nrows() != rows) {
                    return Err(self.shape_err(i, "row counts differ".into()));
                }
                let views: Vec<_> = parts.iter().map(|p| self.v(*p).view()).collect();
                ndarray::concatenate(Axis(1), &views).map_err(|e| self.shape_err(i, e.to_string()))?
            }
            Op::Select(a, idx) => {
                let a = self.v(*a);
                if let Some(bad) = idx.iter().find(|&&j| j >= a.ncols()) {
                    return Err(self.shape_err(i, format!("column {bad} of {}", a.ncols())));
                }
                a.select(Axis(1), idx)
            }
            Op::SumCols(a) => self.v(*a).sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::Sum(a) => Array2::from_elem((1, 1), self.v(*a).sum()),
            Op::Mean(a) => {
                let a = self.v(*a);
                if a.is_empty() {
                    return Err(self.shape_err(i, "mean of an empty matrix".into()));
                }
                Array2::from_elem((1, 1), a.sum() / a.len() as f64)
            }
        };
        Ok(out)
    }

    /// Exact reverse-mode gradients of the scalar `loss` node with respect to
    /// every registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap, TapeError> {
        if !self.evaluated {
            return Err(TapeError::NotEvaluated);
        }
        let lv = self.v(loss);
        if lv.dim() != (1, 1) {
            return Err(TapeError::NotScalar {
                node: loss.0,
                rows: lv.nrows(),
                cols: lv.ncols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));
        let mut grads: Vec<Matrix> = self.param_values.iter().map(|p| Array2::zeros(p.raw_dim())).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let out = self.v(NodeId(i));
            match &self.nodes[i].op {
                Op::Input(_) | Op::Const(_) => {}
                Op::Param(p) => grads[*p] += &g,
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, g.dot(&self.v(*b).t()));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, self.v(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, r) => {
                    if self.nodes[r.0].needs_grad {
                        accumulate(&mut adj, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, -&g);
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, &g * self.v(*b));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, &g * self.v(*a));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g * *c),
                Op::Offset(a, _) => accumulate(&mut adj, *a, g),
                Op::Square(a) => {
                    let d = map2(&g, self.v(*a), |g, x| 2.0 * x * g);
                    accumulate(&mut adj, *a, d);
                }
                Op::SinScaled(a) => {
                    let tau = std::f64::consts::TAU;
                    let d = map2(&g, self.v(*a), |g, x| tau * (tau * x).cos() * g);
                    accumulate(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = map2(&g, out, |g, s| s * (1.0 - s) * g);
                    accumulate(&mut adj, *a, d);
                }
                Op::Exp(a) => accumulate(&mut adj, *a, map2(&g, out, |g, e| e * g)),
                Op::Log(a) => accumulate(&mut adj, *a, map2(&g, self.v(*a), |g, x| g / x)),
                Op::SoftClamp(a, c) => {
                    let c = *c;
                    let d = map2(&g, out, |g, y| {
                        let t = y / c;
                        (1.0 - t * t) * g
                    });
                    accumulate(&mut adj, *a, d);
                }
                Op::HardClamp(a, c) => {
                    let c = *c;
                    let d = map2(&g, self.v(*a), |g, x| if x.abs() <= c { g } else { 0.0 });
                    accumulate(&mut adj, *a, d);
                }
                Op::SmoothL05(a, t) => {
                    let t = *t;
                    let d = map2(&g, self.v(*a), |g, w| smooth_l05_derivative(w, t) * g);
                    accumulate(&mut adj, *a, d);
                }
                Op::Activate(a, acts) => {
                    let d = eql::activate_backward(self.v(*a), out, acts, &g);
                    accumulate(&mut adj, *a, d);
                }
                Op::Columns(a, start, len) => {
                    let mut d = Array2::zeros(self.v(*a).raw_dim());
                    d.slice_mut(s![.., *start..start + len]).assign(&g);
                    accumulate(&mut adj, *a, d);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.v(*p).ncols();
                        if self.nodes[p.0].needs_grad {
                            accumulate(&mut adj, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Select(a, idx) => {
                    let mut d: Matrix = Array2::zeros(self.v(*a).raw_dim());
                    for (j, &src) in idx.iter().enumerate() {
                        let mut dst = d.column_mut(src);
                        dst += &g.column(j);
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::SumCols(a) => {
                    let shape = self.v(*a).raw_dim();
                    let d = g.broadcast(shape).expect("n×1 broadcasts over columns").to_owned();
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.v(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut adj, *a, d);
                }
                Op::Mean(a) => {
                    let x = self.v(*a);
                    let d = Array2::from_elem(x.raw_dim(), g[[0, 0]] / x.len() as f64);
                    accumulate(&mut adj, *a, d);
                }
            }
        }
        Ok(GradientMap { grads })
    }

    /// Compares [`Tape::backward`] against central differences with the
    /// given step, perturbing every parameter entry in turn. Returns the
    /// maximum of `|analytic - numeric| / max(1, |analytic|)`. The tape is
    /// left evaluated at the original parameter values.
    pub fn finite_difference_check(&mut self, loss: NodeId, step: f64) -> Result<f64, TapeError> {
        assert!(step > 0.0, "finite-difference step must be positive");
        if !self.evaluated {
            self.reevaluate()?;
        }
        let analytic = self.backward(loss)?;
        let mut worst: f64 = 0.0;
        for p in 0..self.param_values.len() {
            for k in 0..self.param_values[p].len() {
                let original = self.param_values[p].as_slice().expect("standard layout")[k];
                let probe = |tape: &mut Tape, x: f64| -> Result<f64, TapeError> {
                    tape.param_values[p].as_slice_mut().expect("standard layout")[k] = x;
                    tape.reevaluate()?;
                    Ok(tape.v(loss)[[0, 0]])
                };
                let plus = probe(self, original + step)?;
                let minus = probe(self, original - step)?;
                self.param_values[p].as_slice_mut().expect("standard layout")[k] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic.grads[p].as_slice().expect("standard layout")[k];
                worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            }
        }
        self.reevaluate()?;
        Ok(worst)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], node: NodeId, d: Matrix) {
    match &mut adj[node.0] {
        Some(existing) => *existing += &d,
        slot => *slot = Some(d),
    }
}

fn map2(g: &Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Zip::from(g).and(x).map_collect(|&g, &x| f(g, x))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn soft_clamp(x: f64, bound: f64) -> f64 {
    bound * (x / bound).tanh()
}

/// Smoothed `|w|^{1/2}`: exact for `|w| >= a`, and the square root of the
/// quartic `-w⁴/(8a³) + 3w²/(4a) + 3a/8` inside, which matches value and
/// slope at `|w| = a`.
pub fn smooth_l05(w: f64, a: f64) -> f64 {
    let m = w.abs();
    if m >= a {
        m.sqrt()
    } else {
        smoothing_quartic(w, a).sqrt()
    }
}

fn smoothing_quartic(w: f64, a: f64) -> f64 {
    let w2 = w * w;
    -w2 * w2 / (8.0 * a * a * a) + 3.0 * w2 / (4.0 * a) + 3.0 * a / 8.0
}

pub fn smooth_l05_derivative(w: f64, a: f64) -> f64 {
    let m = w.abs();
    if m >= a {
        w.signum() / (2.0 * m.sqrt())
    } else {
        let dp = -w * w * w / (2.0 * a * a * a) + 3.0 * w / (2.0 * a);
        dp / (2.0 * smoothing_quartic(w, a).sqrt())
    }
}
