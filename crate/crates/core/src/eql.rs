//! Equation-learner subnetworks.
//!
//! An [`EqlNetwork`] is a stack of fully connected layers whose hidden units
//! apply symbolic primitives (constant, identity, square, `sin(2π·)`,
//! sigmoid, clamped exp, pairwise product) instead of a fixed nonlinearity.
//! The readout layer is linear. Weight matrices are stored `fan_in × fan_out`
//! so a batch `h` (rows = samples) maps as `h·W + b`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{smooth_l05, Matrix, NodeId, Tape};

/// Bound used inside the exp activation, `exp(c·tanh(g/c))`.
pub const EXP_ACTIVATION_CLAMP: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EqlError {
    #[error("input width {got} does not match network input width {expected}")]
    Width { expected: usize, got: usize },
    #[error("smoothing threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("activation library is empty")]
    EmptyLibrary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Constant 1; its pre-activation is ignored.
    Constant,
    Identity,
    Square,
    /// `sin(2π·g)`.
    Sine,
    Sigmoid,
    /// `exp(c·tanh(g/c))` with `c = EXP_ACTIVATION_CLAMP`.
    Exp,
    /// Product of two consecutive pre-activations.
    Product,
}

impl Activation {
    pub fn arity(self) -> usize {
        match self {
            Activation::Product => 2,
            _ => 1,
        }
    }

    fn token(self) -> &'static str {
        match self {
            Activation::Constant => "1",
            Activation::Identity => "id",
            Activation::Square => "sq",
            Activation::Sine => "sin",
            Activation::Sigmoid => "sig",
            Activation::Exp => "exp",
            Activation::Product => "mul",
        }
    }
}

impl FromStr for Activation {
    type Err = EqlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "1" | "one" | "const" | "constant" => Activation::Constant,
            "id" | "identity" => Activation::Identity,
            "sq" | "square" => Activation::Square,
            "sin" | "sine" => Activation::Sine,
            "sig" | "sigmoid" => Activation::Sigmoid,
            "exp" => Activation::Exp,
            "mul" | "product" | "prod" => Activation::Product,
            other => return Err(EqlError::UnknownActivation(other.to_string())),
        })
    }
}

/// Activation list used for every hidden layer of a subnetwork, in
/// evaluation order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ActivationLibrary(Vec<Activation>);

impl ActivationLibrary {
    pub fn new(acts: Vec<Activation>) -> Result<Self, EqlError> {
        if acts.is_empty() {
            return Err(EqlError::EmptyLibrary);
        }
        Ok(Self(acts))
    }

    pub fn activations(&self) -> &[Activation] {
        &self.0
    }

    pub fn output_width(&self) -> usize {
        self.0.len()
    }

    pub fn pre_activation_width(&self) -> usize {
        pre_activation_width(&self.0)
    }
}

impl Default for ActivationLibrary {
    /// `{1, id×2, sq×4, sin×2, sig×2, mul×2}`.
    fn default() -> Self {
        "1, id*2, sq*4, sin*2, sig*2, mul*2"
            .parse()
            .expect("valid default library")
    }
}

impl FromStr for ActivationLibrary {
    type Err = EqlError;

    /// Comma-separated tokens with optional `*count` repetition, e.g.
    /// `"1, id*2, sq*4"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut acts = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (name, count) = match item.split_once('*') {
                Some((name, n)) => {
                    let n: usize = n
                        .trim()
                        .parse()
                        .map_err(|_| EqlError::UnknownActivation(item.to_string()))?;
                    (name, n)
                }
                None => (item, 1),
            };
            let act: Activation = name.parse()?;
            acts.extend(std::iter::repeat_n(act, count));
        }
        Self::new(acts)
    }
}

impl fmt::Display for ActivationLibrary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut runs: Vec<(Activation, usize)> = Vec::new();
        for &a in &self.0 {
            match runs.last_mut() {
                Some((last, n)) if *last == a => *n += 1,
                _ => runs.push((a, 1)),
            }
        }
        let parts: Vec<String> = runs
            .iter()
            .map(|(a, n)| {
                if *n == 1 {
                    a.token().to_string()
                } else {
                    format!("{}*{n}", a.token())
                }
            })
            .collect();
        f.write_str(&parts.join(", "))
    }
}

impl TryFrom<String> for ActivationLibrary {
    type Error = EqlError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ActivationLibrary> for String {
    fn from(lib: ActivationLibrary) -> String {
        lib.to_string()
    }
}

pub fn pre_activation_width(acts: &[Activation]) -> usize {
    acts.iter().map(|a| a.arity()).sum()
}

/// Applies `acts` to the pre-activation matrix `g` (`n × pre_width`).
pub fn activate(g: &Matrix, acts: &[Activation]) -> Matrix {
    let mut out = Array2::zeros((g.nrows(), acts.len()));
    let mut col = 0;
    for (j, act) in acts.iter().enumerate() {
        let mut dst = out.column_mut(j);
        let x = g.column(col);
        match act {
            Activation::Constant => dst.fill(1.0),
            Activation::Identity => dst.assign(&x),
            Activation::Square => Zip::from(&mut dst).and(&x).for_each(|d, &x| *d = x * x),
            Activation::Sine => Zip::from(&mut dst)
                .and(&x)
                .for_each(|d, &x| *d = (std::f64::consts::TAU * x).sin()),
            Activation::Sigmoid => Zip::from(&mut dst)
                .and(&x)
                .for_each(|d, &x| *d = crate::autodiff::sigmoid(x)),
            Activation::Exp => Zip::from(&mut dst)
                .and(&x)
                .for_each(|d, &x| *d = crate::autodiff::soft_clamp(x, EXP_ACTIVATION_CLAMP).exp()),
            Activation::Product => {
                let y = g.column(col + 1);
                Zip::from(&mut dst).and(&x).and(&y).for_each(|d, &x, &y| *d = x * y)
            }
        }
        col += act.arity();
    }
    out
}

/// Adjoint of [`activate`]: maps the output adjoint `grad` (`n × acts.len()`)
/// back to the pre-activations.
pub fn activate_backward(g: &Matrix, out: &Matrix, acts: &[Activation], grad: &Matrix) -> Matrix {
    let mut d = Array2::zeros(g.raw_dim());
    let mut col = 0;
    for (j, act) in acts.iter().enumerate() {
        let x = g.column(col);
        let gy = grad.column(j);
        match act {
            Activation::Constant => {}
            Activation::Identity => d.column_mut(col).assign(&gy),
            Activation::Square => Zip::from(d.column_mut(col))
                .and(&x)
                .and(&gy)
                .for_each(|d, &x, &gy| *d = 2.0 * x * gy),
            Activation::Sine => {
                let tau = std::f64::consts::TAU;
                Zip::from(d.column_mut(col))
                    .and(&x)
                    .and(&gy)
                    .for_each(|d, &x, &gy| *d = tau * (tau * x).cos() * gy)
            }
            Activation::Sigmoid => Zip::from(d.column_mut(col))
                .and(&out.column(j))
                .and(&gy)
                .for_each(|d, &s, &gy| *d = s * (1.0 - s) * gy),
            Activation::Exp => Zip::from(d.column_mut(col))
                .and(&x)
                .and(&out.column(j))
                .and(&gy)
                .for_each(|d, &x, &e, &gy| {
                    let t = (x / EXP_ACTIVATION_CLAMP).tanh();
                    *d = e * (1.0 - t * t) * gy
                }),
            Activation::Product => {
                let y = g.column(col + 1);
                Zip::from(d.column_mut(col))
                    .and(&y)
                    .and(&gy)
                    .for_each(|d, &y, &gy| *d = y * gy);
                Zip::from(d.column_mut(col + 1))
                    .and(&x)
                    .and(&gy)
                    .for_each(|d, &x, &gy| *d = x * gy);
            }
        }
        col += act.arity();
    }
    d
}

/// Affine map `h·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(fan_in, fan_out);
        if fan_in + fan_out > 0 {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-r, r).expect("finite range");
            layer.weight.mapv_inplace(|_| dist.sample(rng));
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, h: &Matrix) -> Matrix {
        h.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub dense: Dense,
    pub activations: Vec<Activation>,
}

/// Role of a parameter matrix; only weights are penalized and pruned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqlNetwork {
    pub hidden: Vec<HiddenLayer>,
    pub readout: Dense,
}

/// Tape handles for one network's parameters.
#[derive(Clone, Debug)]
pub struct EqlVars {
    hidden: Vec<(NodeId, NodeId)>,
    readout: (NodeId, NodeId),
}

impl EqlVars {
    pub fn weights(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.hidden
            .iter()
            .map(|(w, _)| *w)
            .chain(std::iter::once(self.readout.0))
    }
}

impl EqlNetwork {
    /// Random hidden layers with the given activation library and a
    /// zero-initialized readout, so a fresh network outputs zeros.
    pub fn new<R: Rng + ?Sized>(
        input_width: usize,
        output_width: usize,
        hidden_layers: usize,
        library: &ActivationLibrary,
        rng: &mut R,
    ) -> Self {
        let mut width = input_width;
        let mut hidden = Vec::with_capacity(hidden_layers);
        for _ in 0..hidden_layers {
            let dense = Dense::glorot(width, library.pre_activation_width(), rng);
            hidden.push(HiddenLayer {
                dense,
                activations: library.activations().to_vec(),
            });
            width = library.output_width();
        }
        Self {
            hidden,
            readout: Dense::zeros(width, output_width),
        }
    }

    /// A network with no hidden layers: `x·W + b`.
    pub fn linear(weight: Matrix, bias: Matrix) -> Self {
        Self {
            hidden: Vec::new(),
            readout: Dense { weight, bias },
        }
    }

    pub fn input_width(&self) -> usize {
        self.hidden
            .first()
            .map(|l| l.dense.fan_in())
            .unwrap_or_else(|| self.readout.fan_in())
    }

    pub fn output_width(&self) -> usize {
        self.readout.fan_out()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, EqlError> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        Ok(self.forward_batch(&x)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates every row of `x` (`n × input_width`).
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix, EqlError> {
        if x.ncols() != self.input_width() {
            return Err(EqlError::Width {
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        let mut h = x.to_owned();
        for layer in &self.hidden {
            let g = layer.dense.apply(&h);
            h = activate(&g, &layer.activations);
        }
        Ok(self.readout.apply(&h))
    }

    /// Visits parameters in canonical order: each hidden layer's weight then
    /// bias, then the readout's.
    pub fn for_each_param(&self, f: &mut dyn FnMut(ParamRole, &Matrix)) {
        for layer in &self.hidden {
            f(ParamRole::Weight, &layer.dense.weight);
            f(ParamRole::Bias, &layer.dense.bias);
        }
        f(ParamRole::Weight, &self.readout.weight);
        f(ParamRole::Bias, &self.readout.bias);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(ParamRole, &mut Matrix)) {
        for layer in &mut self.hidden {
            f(ParamRole::Weight, &mut layer.dense.weight);
            f(ParamRole::Bias, &mut layer.dense.bias);
        }
        f(ParamRole::Weight, &mut self.readout.weight);
        f(ParamRole::Bias, &mut self.readout.bias);
    }

    pub fn register(&self, tape: &mut Tape) -> EqlVars {
        let hidden = self
            .hidden
            .iter()
            .map(|l| (tape.param(l.dense.weight.clone()), tape.param(l.dense.bias.clone())))
            .collect();
        let readout = (
            tape.param(self.readout.weight.clone()),
            tape.param(self.readout.bias.clone()),
        );
        EqlVars { hidden, readout }
    }

    /// Records the network applied to `input` on the tape.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &EqlVars, input: NodeId) -> NodeId {
        let mut h = input;
        for (layer, (w, b)) in self.hidden.iter().zip(&vars.hidden) {
            let g = tape.matmul(h, *w);
            let g = tape.add_row(g, *b);
            h = tape.activate(g, Arc::from(layer.activations.as_slice()));
        }
        let y = tape.matmul(h, vars.readout.0);
        tape.add_row(y, vars.readout.1)
    }

    pub fn weight_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |role, m| {
            if role == ParamRole::Weight {
                n += m.len();
            }
        });
        n
    }

    pub fn nonzero_weights(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |role, m| {
            if role == ParamRole::Weight {
                n += m.iter().filter(|w| **w != 0.0).count();
            }
        });
        n
    }
}

/// Sum of the smoothed `|w|^{1/2}` over every weight (biases excluded).
pub fn l05_penalty(net: &EqlNetwork, threshold: f64) -> Result<f64, EqlError> {
    if threshold <= 0.0 || !threshold.is_finite() {
        return Err(EqlError::InvalidThreshold(threshold));
    }
    let mut total = 0.0;
    net.for_each_param(&mut |role, m| {
        if role == ParamRole::Weight {
            total += m.iter().map(|&w| smooth_l05(w, threshold)).sum::<f64>();
        }
    });
    Ok(total)
}

/// Records [`l05_penalty`] for the weights in `vars`.
pub fn l05_penalty_on_tape(tape: &mut Tape, vars: &EqlVars, threshold: f64) -> Option<NodeId> {
    let mut total: Option<NodeId> = None;
    for w in vars.weights() {
        let r = tape.smooth_l05(w, threshold);
        let s = tape.sum(r);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    total
}

/// Sets every weight with `|w| < tol` to exactly zero. Returns the pruned
/// network and the number of nonzero weights that were zeroed.
pub fn threshold_weights(net: &EqlNetwork, tol: f64) -> (EqlNetwork, usize) {
    let mut pruned = net.clone();
    let mut zeroed = 0;
    pruned.for_each_param_mut(&mut |role, m| {
        if role == ParamRole::Weight {
            m.mapv_inplace(|w| {
                if w != 0.0 && w.abs() < tol {
                    zeroed += 1;
                    0.0
                } else {
                    w
                }
            });
        }
    });
    (pruned, zeroed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, library: &str) -> EqlNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib: ActivationLibrary = library.parse().unwrap();
        let mut net = EqlNetwork::new(2, 2, 2, &lib, &mut rng);
        net.readout = Dense::glorot(lib.output_width(), 2, &mut rng);
        net.for_each_param_mut(&mut |role, m| {
            if role == ParamRole::Bias {
                m.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        });
        net
    }

    #[test]
    fn library_parsing_and_widths() {
        let lib = ActivationLibrary::default();
        assert_eq!(lib.output_width(), 13);
        assert_eq!(lib.pre_activation_width(), 15);
        assert_eq!(lib.to_string(), "1, id*2, sq*4, sin*2, sig*2, mul*2");
        assert!("id, tanh".parse::<ActivationLibrary>().is_err());
        assert_eq!("".parse::<ActivationLibrary>(), Err(EqlError::EmptyLibrary));
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let net = EqlNetwork::linear(Array2::eye(3), Array2::zeros((1, 3)));
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let net = EqlNetwork::linear(Array2::eye(2), Array2::zeros((1, 2)));
        assert_eq!(net.forward(&[1.0]), Err(EqlError::Width { expected: 2, got: 1 }));
    }

    #[test]
    fn matches_hand_evaluated_composition() {
        // One hidden layer {id, sq, sin, mul}: pre-activations g0..g4.
        let w1 = array![[0.3, -0.2, 0.5, 1.1, -0.7], [0.4, 0.9, -0.6, 0.2, 0.8]];
        let b1 = array![[0.1, -0.3, 0.05, 0.2, -0.1]];
        let w2 = array![[1.5], [-0.4], [0.7], [2.0]];
        let b2 = array![[0.25]];
        let net = EqlNetwork {
            hidden: vec![HiddenLayer {
                dense: Dense {
                    weight: w1.clone(),
                    bias: b1.clone(),
                },
                activations: vec![
                    Activation::Identity,
                    Activation::Square,
                    Activation::Sine,
                    Activation::Product,
                ],
            }],
            readout: Dense {
                weight: w2.clone(),
                bias: b2.clone(),
            },
        };
        for &(x0, x1) in &[(0.0, 0.0), (1.0, -2.0), (0.37, 0.81), (-1.3, 0.2)] {
            let g = |j: usize| w1[[0, j]] * x0 + w1[[1, j]] * x1 + b1[[0, j]];
            let h = [
                g(0),
                g(1) * g(1),
                (2.0 * std::f64::consts::PI * g(2)).sin(),
                g(3) * g(4),
            ];
            let expected = h.iter().zip(w2.column(0)).map(|(h, w)| h * w).sum::<f64>() + b2[[0, 0]];
            let got = net.forward(&[x0, x1]).unwrap()[0];
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn tape_forward_matches_direct_evaluation() {
        let net = random_net(3, "1, id*2, sq*2, sin, sig, exp, mul*2");
        let x = array![[0.2, -0.4], [1.3, 0.7], [-0.9, 0.05]];
        let mut tape = Tape::new();
        let input = tape.input();
        let vars = net.register(&mut tape);
        let out = net.forward_on_tape(&mut tape, &vars, input);
        tape.declare_output(out);
        let got = tape.forward_eval(std::slice::from_ref(&x)).unwrap().remove(0);
        let direct = net.forward_batch(&x).unwrap();
        assert!((got - direct).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn network_gradients_match_differences() {
        for seed in 0..5 {
            let net = random_net(seed, "1, id*2, sq*4, sin*2, sig*2, mul*2");
            let mut tape = Tape::new();
            let input = tape.input();
            let vars = net.register(&mut tape);
            let out = net.forward_on_tape(&mut tape, &vars, input);
            let sq = tape.square(out);
            let loss = tape.mean(sq);
            tape.forward_eval(&[array![[0.3, -0.2], [0.1, 0.6]]]).unwrap();
            let err = tape.finite_difference_check(loss, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn penalty_values() {
        let one = EqlNetwork::linear(array![[1.0]], array![[0.0]]);
        assert!((l05_penalty(&one, 0.05).unwrap() - 1.0).abs() < 1e-15);
        let zero = EqlNetwork::linear(array![[0.0]], array![[3.0]]);
        assert!((l05_penalty(&zero, 0.05).unwrap() - 0.136_930_639_376_291_5).abs() < 1e-12);
        assert_eq!(l05_penalty(&zero, 0.0), Err(EqlError::InvalidThreshold(0.0)));
        assert!(l05_penalty(&zero, -1.0).is_err());
    }

    #[test]
    fn pruning_zeroes_small_weights() {
        let net = random_net(11, "id, sq, mul");
        let (same, n) = threshold_weights(&net, 0.0);
        assert_eq!(n, 0);
        assert_eq!(same, net);

        let (all, _) = threshold_weights(&net, f64::INFINITY);
        assert_eq!(all.nonzero_weights(), 0);
        let out = all.forward(&[0.7, -1.2]).unwrap();
        let bias = all.readout.bias.row(0).to_vec();
        assert_eq!(out, bias);
    }
}
