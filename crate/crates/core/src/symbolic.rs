//! Closed-form expressions read off trained networks.
//!
//! [`extract`] turns an [`EqlNetwork`] into one [`Expr`] per output, exact up
//! to floating-point reassociation. [`compose_model`] assembles the
//! per-block expressions of a whole model into an
//! [`InvertibleExpressionSet`] that can be rendered in a block-by-block
//! table, evaluated in both directions, and, when small enough, flattened
//! into closed forms `z = f(x)` and `x = f⁻¹(z)`.
//!
//! Constants keep full precision internally; only rendering rounds them.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Matrix};
use crate::coupling::{split_sizes, CouplingBlock, InvertibleStack, Stage};
use crate::eql::{Activation, EqlNetwork, ParamRole, EXP_ACTIVATION_CLAMP};
use crate::flows::Model;

/// Node budget for the flattened closed forms.
pub const FLATTEN_BUDGET: usize = 600;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("expected {expected} values, got {got}")]
    Width { expected: usize, got: usize },
}

/// Expression tree. `Sin` is the plain sine; the `2π` of the network's
/// sine activation is folded into its argument at extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    Var(String),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Square(Box<Expr>),
    Sin(Box<Expr>),
    Sigmoid(Box<Expr>),
    Exp(Box<Expr>),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Self {
        Expr::Var(name.into())
    }

    pub fn neg(e: Expr) -> Self {
        Expr::Mul(vec![Expr::Const(-1.0), e])
    }

    pub fn sub(a: Expr, b: Expr) -> Self {
        Expr::Add(vec![a, Expr::neg(b)])
    }

    /// `bound·tanh(e/bound)` written as `2·bound·σ(2e/bound) − bound`.
    pub fn soft_clamp(e: Expr, bound: f64) -> Self {
        Expr::Add(vec![
            Expr::Mul(vec![
                Expr::Const(2.0 * bound),
                Expr::Sigmoid(Box::new(Expr::Mul(vec![Expr::Const(2.0 / bound), e]))),
            ]),
            Expr::Const(-bound),
        ])
    }

    pub fn node_count(&self) -> usize {
        1 + match self {
            Expr::Const(_) | Expr::Var(_) => 0,
            Expr::Add(a) | Expr::Mul(a) => a.iter().map(Expr::node_count).sum(),
            Expr::Square(a) | Expr::Sin(a) | Expr::Sigmoid(a) | Expr::Exp(a) => a.node_count(),
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn eval(&self, env: &HashMap<String, f64>) -> Result<f64, SymbolicError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => *env.get(v).ok_or_else(|| SymbolicError::UnboundVariable(v.clone()))?,
            Expr::Add(a) => {
                let mut s = 0.0;
                for e in a {
                    s += e.eval(env)?;
                }
                s
            }
            Expr::Mul(a) => {
                let mut p = 1.0;
                for e in a {
                    p *= e.eval(env)?;
                }
                p
            }
            Expr::Square(a) => {
                let v = a.eval(env)?;
                v * v
            }
            Expr::Sin(a) => a.eval(env)?.sin(),
            Expr::Sigmoid(a) => sigmoid(a.eval(env)?),
            Expr::Exp(a) => a.eval(env)?.exp(),
        })
    }

    /// Replaces variables found in `map`.
    pub fn substitute(&self, map: &HashMap<String, Expr>) -> Expr {
        match self {
            Expr::Const(_) => self.clone(),
            Expr::Var(v) => map.get(v).cloned().unwrap_or_else(|| self.clone()),
            Expr::Add(a) => Expr::Add(a.iter().map(|e| e.substitute(map)).collect()),
            Expr::Mul(a) => Expr::Mul(a.iter().map(|e| e.substitute(map)).collect()),
            Expr::Square(a) => Expr::Square(Box::new(a.substitute(map))),
            Expr::Sin(a) => Expr::Sin(Box::new(a.substitute(map))),
            Expr::Sigmoid(a) => Expr::Sigmoid(Box::new(a.substitute(map))),
            Expr::Exp(a) => Expr::Exp(Box::new(a.substitute(map))),
        }
    }

    /// Variables in first-appearance order.
    pub fn variables(&self) -> Vec<String> {
        fn walk(e: &Expr, out: &mut Vec<String>) {
            match e {
                Expr::Const(_) => {}
                Expr::Var(v) => {
                    if !out.contains(v) {
                        out.push(v.clone());
                    }
                }
                Expr::Add(a) | Expr::Mul(a) => a.iter().for_each(|e| walk(e, out)),
                Expr::Square(a) | Expr::Sin(a) | Expr::Sigmoid(a) | Expr::Exp(a) => walk(a, out),
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// `(c₀, {v: cᵥ})` when the expression is `c₀ + Σ cᵥ·v`.
    pub fn affine_form(&self) -> Option<(f64, HashMap<String, f64>)> {
        let mut coeffs = HashMap::new();
        let mut offset = 0.0;
        let terms: Vec<&Expr> = match self {
            Expr::Add(a) => a.iter().collect(),
            other => vec![other],
        };
        for t in terms {
            match t {
                Expr::Const(c) => offset += c,
                Expr::Var(v) => *coeffs.entry(v.clone()).or_insert(0.0) += 1.0,
                Expr::Mul(f) => {
                    let mut c = 1.0;
                    let mut var = None;
                    for x in f {
                        match x {
                            Expr::Const(k) => c *= k,
                            Expr::Var(v) if var.is_none() => var = Some(v.clone()),
                            _ => return None,
                        }
                    }
                    match var {
                        Some(v) => *coeffs.entry(v).or_insert(0.0) += c,
                        None => offset += c,
                    }
                }
                _ => return None,
            }
        }
        Some((offset, coeffs))
    }

    /// Renders with constants at `digits` significant digits.
    pub fn render(&self, digits: usize) -> String {
        let mut s = String::new();
        self.write(&mut s, digits);
        s
    }

    fn write(&self, out: &mut String, digits: usize) {
        match self {
            Expr::Const(c) => out.push_str(&format_sig(*c, digits)),
            Expr::Var(v) => out.push_str(v),
            Expr::Add(terms) => {
                for (i, t) in terms.iter().enumerate() {
                    let (negative, body) = negated(t);
                    match (i, negative) {
                        (0, true) => out.push('-'),
                        (0, false) => {}
                        (_, true) => out.push_str(" - "),
                        (_, false) => out.push_str(" + "),
                    }
                    body.write(out, digits);
                }
            }
            Expr::Mul(factors) => {
                let mut factors: &[Expr] = factors;
                if let Some(Expr::Const(c)) = factors.first() {
                    if *c == -1.0 && factors.len() > 1 {
                        out.push('-');
                        factors = &factors[1..];
                    }
                }
                for (i, f) in factors.iter().enumerate() {
                    if i > 0 {
                        out.push('·');
                    }
                    let wrap = matches!(f, Expr::Add(_)) || (i > 0 && matches!(f, Expr::Const(c) if *c < 0.0));
                    if wrap {
                        out.push('(');
                    }
                    f.write(out, digits);
                    if wrap {
                        out.push(')');
                    }
                }
            }
            Expr::Square(a) => {
                let atomic = matches!(**a, Expr::Var(_)) || matches!(**a, Expr::Const(c) if c >= 0.0);
                if atomic {
                    a.write(out, digits);
                } else {
                    out.push('(');
                    a.write(out, digits);
                    out.push(')');
                }
                out.push('²');
            }
            Expr::Sin(a) => call(out, "sin", a, digits),
            Expr::Sigmoid(a) => call(out, "sigmoid", a, digits),
            Expr::Exp(a) => call(out, "exp", a, digits),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(3))
    }
}

fn call(out: &mut String, name: &str, a: &Expr, digits: usize) {
    out.push_str(name);
    out.push('(');
    a.write(out, digits);
    out.push(')');
}

/// Splits a leading negative sign off an additive term for rendering.
fn negated(t: &Expr) -> (bool, Expr) {
    match t {
        Expr::Const(c) if *c < 0.0 => (true, Expr::Const(-c)),
        Expr::Mul(f) => match f.first() {
            Some(Expr::Const(c)) if *c < 0.0 => {
                let mut rest = f.clone();
                if *c == -1.0 {
                    rest.remove(0);
                } else {
                    rest[0] = Expr::Const(-c);
                }
                let body = if rest.len() == 1 {
                    rest.pop().expect("one")
                } else {
                    Expr::Mul(rest)
                };
                (true, body)
            }
            _ => (false, t.clone()),
        },
        _ => (false, t.clone()),
    }
}

/// `v` at `digits` significant digits, switching to scientific notation
/// outside `[1e-3, 1e5)`.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let digits = digits.max(1);
    let exp = v.abs().log10().floor() as i32;
    if (-3..5).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Rounding can carry into a new digit (9.995 → 10.00); redo once.
        let rounded: f64 = s.parse().expect("formatted float");
        let exp2 = rounded.abs().log10().floor() as i32;
        if exp2 != exp {
            let decimals = (digits as i32 - 1 - exp2).max(0) as usize;
            return format!("{v:.decimals$}");
        }
        s
    } else {
        format!("{:.*e}", digits - 1, v)
    }
}

/// Constant folding, removal of `×0`, `×1`, `+0`, flattening of nested sums
/// and products, merging of like terms, and distribution of constant factors
/// over sums whose terms all carry a constant coefficient. Never returns a
/// larger tree than its input.
pub fn simplify(e: &Expr) -> Expr {
    let s = simp(e);
    if s.node_count() <= e.node_count() {
        s
    } else {
        e.clone()
    }
}

fn simp(e: &Expr) -> Expr {
    match e {
        Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Square(a) => unary(simp(a), |c| c * c, Expr::Square),
        Expr::Sin(a) => unary(simp(a), f64::sin, Expr::Sin),
        Expr::Sigmoid(a) => unary(simp(a), sigmoid, Expr::Sigmoid),
        Expr::Exp(a) => unary(simp(a), f64::exp, Expr::Exp),
        Expr::Mul(a) => simp_mul(a.iter().map(simp).collect()),
        Expr::Add(a) => simp_add(a.iter().map(simp).collect()),
    }
}

fn unary(a: Expr, f: impl Fn(f64) -> f64, wrap: impl Fn(Box<Expr>) -> Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(f(c)),
        other => wrap(Box::new(other)),
    }
}

/// `(coefficient, rest)` of a term; `rest` is `None` for a constant.
fn split_coeff(t: Expr) -> (f64, Option<Expr>) {
    match t {
        Expr::Const(c) => (c, None),
        Expr::Mul(mut f) => match f.first() {
            Some(Expr::Const(c)) => {
                let c = *c;
                f.remove(0);
                let rest = if f.len() == 1 {
                    f.pop().expect("one")
                } else {
                    Expr::Mul(f)
                };
                (c, Some(rest))
            }
            _ => (1.0, Some(Expr::Mul(f))),
        },
        other => (1.0, Some(other)),
    }
}

fn with_coeff(c: f64, rest: Expr) -> Expr {
    if c == 1.0 {
        return rest;
    }
    match rest {
        Expr::Mul(mut f) => {
            f.insert(0, Expr::Const(c));
            Expr::Mul(f)
        }
        other => Expr::Mul(vec![Expr::Const(c), other]),
    }
}

fn simp_mul(args: Vec<Expr>) -> Expr {
    let mut c = 1.0;
    let mut factors = Vec::new();
    let mut stack = args;
    stack.reverse();
    while let Some(a) = stack.pop() {
        match a {
            Expr::Const(k) => c *= k,
            Expr::Mul(inner) => stack.extend(inner.into_iter().rev()),
            other => factors.push(other),
        }
    }
    if c == 0.0 {
        return Expr::Const(0.0);
    }
    if factors.is_empty() {
        return Expr::Const(c);
    }
    if c != 1.0 && factors.len() == 1 {
        if let Expr::Add(terms) = &factors[0] {
            // Distributing grows a bare variable term by two nodes and saves
            // two at the top, so at most one such term keeps the size.
            let led = |t: &Expr| {
                matches!(t, Expr::Const(_)) || matches!(t, Expr::Mul(f) if matches!(f.first(), Some(Expr::Const(_))))
            };
            let bare = terms.iter().filter(|t| matches!(t, Expr::Var(_))).count();
            let distributable = bare <= 1 && terms.iter().all(|t| led(t) || matches!(t, Expr::Var(_)));
            if distributable {
                let scaled = terms
                    .iter()
                    .cloned()
                    .map(|t| {
                        let (k, rest) = split_coeff(t);
                        match rest {
                            None => Expr::Const(c * k),
                            Some(r) => with_coeff(c * k, r),
                        }
                    })
                    .collect();
                return simp_add(scaled);
            }
        }
    }
    if factors.len() == 1 && c == 1.0 {
        return factors.pop().expect("one");
    }
    if c != 1.0 {
        factors.insert(0, Expr::Const(c));
    }
    Expr::Mul(factors)
}

fn simp_add(args: Vec<Expr>) -> Expr {
    let mut constant = 0.0;
    let mut terms: Vec<(f64, Expr)> = Vec::new();
    let mut stack = args;
    stack.reverse();
    while let Some(a) = stack.pop() {
        match a {
            Expr::Add(inner) => stack.extend(inner.into_iter().rev()),
            other => match split_coeff(other) {
                (c, None) => constant += c,
                (c, Some(rest)) => match terms.iter_mut().find(|(_, r)| *r == rest) {
                    Some((k, _)) => *k += c,
                    None => terms.push((c, rest)),
                },
            },
        }
    }
    let mut out: Vec<Expr> = terms
        .into_iter()
        .filter(|(c, _)| *c != 0.0)
        .map(|(c, r)| with_coeff(c, r))
        .collect();
    if constant != 0.0 {
        out.push(Expr::Const(constant));
    }
    match out.len() {
        0 => Expr::Const(0.0),
        1 => out.pop().expect("one"),
        _ => Expr::Add(out),
    }
}

/// Copy of `net` with weights below `prune_tol` and biases below `const_tol`
/// (in magnitude) set to zero. [`extract`] with the same tolerances is
/// exactly this network's function.
pub fn prune_network(net: &EqlNetwork, prune_tol: f64, const_tol: f64) -> EqlNetwork {
    let mut out = net.clone();
    out.for_each_param_mut(&mut |role, m| {
        let tol = match role {
            ParamRole::Weight => prune_tol,
            ParamRole::Bias => const_tol,
        };
        m.mapv_inplace(|w| if w.abs() < tol { 0.0 } else { w });
    });
    out
}

fn affine(inputs: &[Expr], w: &Matrix, b: &Matrix, j: usize, prune_tol: f64, const_tol: f64) -> Expr {
    let mut terms: Vec<Expr> = inputs
        .iter()
        .enumerate()
        .filter(|(i, _)| w[[*i, j]] != 0.0 && w[[*i, j]].abs() >= prune_tol)
        .map(|(i, x)| Expr::Mul(vec![Expr::Const(w[[i, j]]), x.clone()]))
        .collect();
    let bias = b[[0, j]];
    if bias != 0.0 && bias.abs() >= const_tol {
        terms.push(Expr::Const(bias));
    }
    Expr::Add(terms)
}

/// One simplified expression per network output, in the variables
/// `inputs`.
pub fn extract(net: &EqlNetwork, inputs: &[Expr], prune_tol: f64, const_tol: f64) -> Vec<Expr> {
    assert_eq!(inputs.len(), net.input_width(), "one expression per network input");
    let mut h: Vec<Expr> = inputs.to_vec();
    for layer in &net.hidden {
        let g: Vec<Expr> = (0..layer.dense.fan_out())
            .map(|j| {
                simplify(&affine(
                    &h,
                    &layer.dense.weight,
                    &layer.dense.bias,
                    j,
                    prune_tol,
                    const_tol,
                ))
            })
            .collect();
        let mut next = Vec::with_capacity(layer.activations.len());
        let mut col = 0;
        for act in &layer.activations {
            let x = g[col].clone();
            let e = match act {
                Activation::Constant => Expr::Const(1.0),
                Activation::Identity => x,
                Activation::Square => Expr::Square(Box::new(x)),
                Activation::Sine => Expr::Sin(Box::new(Expr::Mul(vec![Expr::Const(TAU), x]))),
                Activation::Sigmoid => Expr::Sigmoid(Box::new(x)),
                Activation::Exp => Expr::Exp(Box::new(Expr::soft_clamp(x, EXP_ACTIVATION_CLAMP))),
                Activation::Product => Expr::Mul(vec![x, g[col + 1].clone()]),
            };
            next.push(simplify(&e));
            col += act.arity();
        }
        h = next;
    }
    (0..net.output_width())
        .map(|j| {
            simplify(&affine(
                &h,
                &net.readout.weight,
                &net.readout.bias,
                j,
                prune_tol,
                const_tol,
            ))
        })
        .collect()
}

/// Stack program compiled from an [`Expr`] with variables resolved to
/// slots, for fast repeated evaluation.
#[derive(Clone, Debug)]
pub struct Program {
    code: Vec<Instr>,
}

#[derive(Clone, Debug)]
enum Instr {
    Const(f64),
    Slot(usize),
    Add(usize),
    Mul(usize),
    Square,
    Sin,
    Sigmoid,
    Exp,
}

impl Program {
    pub fn compile(e: &Expr, slots: &HashMap<String, usize>) -> Result<Self, SymbolicError> {
        fn emit(e: &Expr, slots: &HashMap<String, usize>, code: &mut Vec<Instr>) -> Result<(), SymbolicError> {
            match e {
                Expr::Const(c) => code.push(Instr::Const(*c)),
                Expr::Var(v) => code.push(Instr::Slot(
                    *slots.get(v).ok_or_else(|| SymbolicError::UnboundVariable(v.clone()))?,
                )),
                Expr::Add(a) | Expr::Mul(a) => {
                    for x in a {
                        emit(x, slots, code)?;
                    }
                    code.push(if matches!(e, Expr::Add(_)) {
                        Instr::Add(a.len())
                    } else {
                        Instr::Mul(a.len())
                    });
                }
                Expr::Square(a) | Expr::Sin(a) | Expr::Sigmoid(a) | Expr::Exp(a) => {
                    emit(a, slots, code)?;
                    code.push(match e {
                        Expr::Square(_) => Instr::Square,
                        Expr::Sin(_) => Instr::Sin,
                        Expr::Sigmoid(_) => Instr::Sigmoid,
                        _ => Instr::Exp,
                    });
                }
            }
            Ok(())
        }
        let mut code = Vec::new();
        emit(e, slots, &mut code)?;
        Ok(Self { code })
    }

    /// Evaluates with the same operation order as [`Expr::eval`].
    pub fn run(&self, slots: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for ins in &self.code {
            match *ins {
                Instr::Const(c) => stack.push(c),
                Instr::Slot(i) => stack.push(slots[i]),
                Instr::Add(n) => {
                    let base = stack.len() - n;
                    let s = stack[base..].iter().fold(0.0, |acc, v| acc + v);
                    stack.truncate(base);
                    stack.push(s);
                }
                Instr::Mul(n) => {
                    let base = stack.len() - n;
                    let p = stack[base..].iter().fold(1.0, |acc, v| acc * v);
                    stack.truncate(base);
                    stack.push(p);
                }
                Instr::Square => {
                    let v = stack.last_mut().expect("operand");
                    *v *= *v;
                }
                Instr::Sin => {
                    let v = stack.last_mut().expect("operand");
                    *v = v.sin();
                }
                Instr::Sigmoid => {
                    let v = stack.last_mut().expect("operand");
                    *v = sigmoid(*v);
                }
                Instr::Exp => {
                    let v = stack.last_mut().expect("operand");
                    *v = v.exp();
                }
            }
        }
        stack.pop().expect("result")
    }
}

/// Expressions of one coupling block. Inside the block the input
/// coordinates are `u_1 … u_d`, the updated first half is `v_1 … v_{d₁}`,
/// and conditions are `y_1 … y_m`. `s1`/`s2` are the effective (clamped)
/// log-scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockExpressions {
    pub width: usize,
    pub condition_width: usize,
    pub s1: Vec<Expr>,
    pub t1: Vec<Expr>,
    pub s2: Vec<Expr>,
    pub t2: Vec<Expr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExprStage {
    Block(BlockExpressions),
    /// Output coordinate `j` takes input coordinate `perm[j]`.
    Permutation(Vec<usize>),
}

/// The whole model as expressions: stage-wise chain plus naming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertibleExpressionSet {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub condition_names: Vec<String>,
    pub padding: usize,
    pub stages: Vec<ExprStage>,
}

fn names(prefix: &str, range: std::ops::Range<usize>) -> Vec<String> {
    range.map(|i| format!("{prefix}_{}", i + 1)).collect()
}

fn vars(prefix: &str, range: std::ops::Range<usize>) -> Vec<Expr> {
    names(prefix, range).into_iter().map(Expr::Var).collect()
}

fn block_expressions(b: &CouplingBlock, prune_tol: f64, const_tol: f64) -> BlockExpressions {
    let (d1, _) = b.split();
    let cond = vars("y", 0..b.condition_width);
    let in1: Vec<Expr> = vars("u", d1..b.width).into_iter().chain(cond.iter().cloned()).collect();
    let in2: Vec<Expr> = vars("v", 0..d1).into_iter().chain(cond.iter().cloned()).collect();
    let clamp = |es: Vec<Expr>| {
        es.into_iter()
            .map(|e| simplify(&Expr::soft_clamp(e, b.clamp)))
            .collect()
    };
    BlockExpressions {
        width: b.width,
        condition_width: b.condition_width,
        s1: clamp(extract(&b.s1, &in1, prune_tol, const_tol)),
        t1: extract(&b.t1, &in1, prune_tol, const_tol),
        s2: clamp(extract(&b.s2, &in2, prune_tol, const_tol)),
        t2: extract(&b.t2, &in2, prune_tol, const_tol),
    }
}

/// Copy of `model` with every subnetwork passed through [`prune_network`].
pub fn prune_model(model: &Model, prune_tol: f64, const_tol: f64) -> Model {
    let mut m = model.clone();
    for b in m.stack_mut().blocks_mut() {
        for net in b.subnets_mut() {
            *net = prune_network(net, prune_tol, const_tol);
        }
    }
    m
}

/// Expression set of `model` after pruning with the given tolerances.
pub fn compose_model(model: &Model, prune_tol: f64, const_tol: f64) -> InvertibleExpressionSet {
    let stack = model.stack();
    let dx = stack.data_width();
    let output_names = match model {
        Model::Isr(m) => names("y", 0..m.y_width)
            .into_iter()
            .chain(names("z", 0..m.z_width()))
            .collect(),
        _ => names("z", 0..dx),
    };
    compose_stack(stack, names("x", 0..dx), output_names, prune_tol, const_tol)
}

pub fn compose_stack(
    stack: &InvertibleStack,
    input_names: Vec<String>,
    output_names: Vec<String>,
    prune_tol: f64,
    const_tol: f64,
) -> InvertibleExpressionSet {
    let stages = stack
        .stages
        .iter()
        .map(|s| match s {
            Stage::Coupling(b) => ExprStage::Block(block_expressions(b, prune_tol, const_tol)),
            Stage::Permutation(p) => ExprStage::Permutation(p.indices().to_vec()),
        })
        .collect();
    InvertibleExpressionSet {
        input_names,
        output_names,
        condition_names: names("y", 0..stack.condition_width),
        padding: stack.padding,
        stages,
    }
}

/// Compiled form of a block for numeric evaluation.
struct CompiledBlock {
    d1: usize,
    width: usize,
    s1: Vec<Program>,
    t1: Vec<Program>,
    s2: Vec<Program>,
    t2: Vec<Program>,
}

impl CompiledBlock {
    /// Slot layout: `u_1..u_d`, then `v_1..v_{d₁}`, then `y_1..y_m`.
    fn new(b: &BlockExpressions) -> Result<Self, SymbolicError> {
        let (d1, _) = split_sizes(b.width);
        let mut slots = HashMap::new();
        for (i, n) in names("u", 0..b.width)
            .into_iter()
            .chain(names("v", 0..d1))
            .chain(names("y", 0..b.condition_width))
            .enumerate()
        {
            slots.insert(n, i);
        }
        let c = |es: &[Expr]| {
            es.iter()
                .map(|e| Program::compile(e, &slots))
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            d1,
            width: b.width,
            s1: c(&b.s1)?,
            t1: c(&b.t1)?,
            s2: c(&b.s2)?,
            t2: c(&b.t2)?,
        })
    }

    fn forward(&self, u: &[f64], y: &[f64], slots: &mut Vec<f64>, stack: &mut Vec<f64>) -> Vec<f64> {
        let d1 = self.d1;
        slots.clear();
        slots.extend_from_slice(u);
        slots.extend(std::iter::repeat_n(0.0, d1));
        slots.extend_from_slice(y);
        for i in 0..d1 {
            let s = self.s1[i].run(slots, stack);
            let t = self.t1[i].run(slots, stack);
            slots[self.width + i] = u[i] * s.exp() + t;
        }
        let mut o: Vec<f64> = slots[self.width..self.width + d1].to_vec();
        for i in 0..self.width - d1 {
            let s = self.s2[i].run(slots, stack);
            let t = self.t2[i].run(slots, stack);
            o.push(u[d1 + i] * s.exp() + t);
        }
        o
    }

    fn inverse(&self, o: &[f64], y: &[f64], slots: &mut Vec<f64>, stack: &mut Vec<f64>) -> Vec<f64> {
        let d1 = self.d1;
        slots.clear();
        slots.extend(std::iter::repeat_n(0.0, self.width));
        slots.extend_from_slice(&o[..d1]);
        slots.extend_from_slice(y);
        for i in 0..self.width - d1 {
            let s = self.s2[i].run(slots, stack);
            let t = self.t2[i].run(slots, stack);
            slots[d1 + i] = (o[d1 + i] - t) * (-s).exp();
        }
        for i in 0..d1 {
            let s = self.s1[i].run(slots, stack);
            let t = self.t1[i].run(slots, stack);
            slots[i] = (o[i] - t) * (-s).exp();
        }
        slots[..self.width].to_vec()
    }
}

enum CompiledStage {
    Block(CompiledBlock),
    Permutation(Vec<usize>),
}

/// Numeric evaluator for an [`InvertibleExpressionSet`].
pub struct CompiledSet {
    width: usize,
    padding: usize,
    condition_width: usize,
    stages: Vec<CompiledStage>,
}

impl CompiledSet {
    /// Forward chain on data-width `x`; returns the full-width output.
    pub fn forward(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, SymbolicError> {
        self.check(x.len(), self.width - self.padding, y.len())?;
        let mut h: Vec<f64> = x.to_vec();
        h.extend(std::iter::repeat_n(0.0, self.padding));
        let (mut slots, mut stack) = (Vec::new(), Vec::new());
        for s in &self.stages {
            h = match s {
                CompiledStage::Block(b) => b.forward(&h, y, &mut slots, &mut stack),
                CompiledStage::Permutation(p) => p.iter().map(|&i| h[i]).collect(),
            };
        }
        Ok(h)
    }

    /// Inverse chain on a full-width output; returns the data-width input.
    pub fn inverse(&self, o: &[f64], y: &[f64]) -> Result<Vec<f64>, SymbolicError> {
        self.check(o.len(), self.width, y.len())?;
        let mut h = o.to_vec();
        let (mut slots, mut stack) = (Vec::new(), Vec::new());
        for s in self.stages.iter().rev() {
            h = match s {
                CompiledStage::Block(b) => b.inverse(&h, y, &mut slots, &mut stack),
                CompiledStage::Permutation(p) => {
                    let mut out = vec![0.0; p.len()];
                    for (j, &i) in p.iter().enumerate() {
                        out[i] = h[j];
                    }
                    out
                }
            };
        }
        h.truncate(self.width - self.padding);
        Ok(h)
    }

    fn check(&self, got: usize, expected: usize, y: usize) -> Result<(), SymbolicError> {
        if got != expected {
            return Err(SymbolicError::Width { expected, got });
        }
        if y != self.condition_width {
            return Err(SymbolicError::Width {
                expected: self.condition_width,
                got: y,
            });
        }
        Ok(())
    }
}

impl InvertibleExpressionSet {
    pub fn width(&self) -> usize {
        self.input_names.len() + self.padding
    }

    pub fn compile(&self) -> Result<CompiledSet, SymbolicError> {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                Ok(match s {
                    ExprStage::Block(b) => CompiledStage::Block(CompiledBlock::new(b)?),
                    ExprStage::Permutation(p) => CompiledStage::Permutation(p.clone()),
                })
            })
            .collect::<Result<Vec<_>, SymbolicError>>()?;
        Ok(CompiledSet {
            width: self.width(),
            padding: self.padding,
            condition_width: self.condition_names.len(),
            stages,
        })
    }

    /// Forward chain evaluated directly on the expression trees.
    pub fn eval_forward(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, SymbolicError> {
        self.compile()?.forward(x, y)
    }

    pub fn eval_inverse(&self, o: &[f64], y: &[f64]) -> Result<Vec<f64>, SymbolicError> {
        self.compile()?.inverse(o, y)
    }

    fn full_output_names(&self) -> Vec<String> {
        let mut n = self.output_names.clone();
        n.extend(names("p", 0..self.padding));
        n
    }

    /// Closed forms of every output coordinate (pads included) in terms of
    /// the inputs, or `None` once the trees outgrow `budget` nodes.
    pub fn flattened_forward(&self, budget: usize) -> Option<Vec<Expr>> {
        let mut h: Vec<Expr> = self.input_names.iter().map(|n| Expr::var(n.clone())).collect();
        h.extend(std::iter::repeat_n(Expr::Const(0.0), self.padding));
        for stage in &self.stages {
            h = match stage {
                ExprStage::Permutation(p) => p.iter().map(|&i| h[i].clone()).collect(),
                ExprStage::Block(b) => {
                    let (d1, _) = split_sizes(b.width);
                    let mut map: HashMap<String, Expr> =
                        names("u", 0..b.width).into_iter().zip(h.iter().cloned()).collect();
                    let mut out = Vec::with_capacity(b.width);
                    for i in 0..d1 {
                        let v = Expr::Add(vec![
                            Expr::Mul(vec![h[i].clone(), Expr::Exp(Box::new(b.s1[i].substitute(&map)))]),
                            b.t1[i].substitute(&map),
                        ]);
                        out.push(simplify(&v));
                    }
                    for (i, v) in out.iter().enumerate() {
                        map.insert(format!("v_{}", i + 1), v.clone());
                    }
                    for i in 0..b.width - d1 {
                        let o = Expr::Add(vec![
                            Expr::Mul(vec![h[d1 + i].clone(), Expr::Exp(Box::new(b.s2[i].substitute(&map)))]),
                            b.t2[i].substitute(&map),
                        ]);
                        out.push(simplify(&o));
                    }
                    out
                }
            };
            if h.iter().map(Expr::node_count).sum::<usize>() > budget {
                return None;
            }
        }
        Some(h)
    }

    /// Closed forms of the data inputs in terms of the outputs, with padded
    /// outputs set to zero, or `None` past `budget` nodes.
    pub fn flattened_inverse(&self, budget: usize) -> Option<Vec<Expr>> {
        let mut h: Vec<Expr> = self.output_names.iter().map(|n| Expr::var(n.clone())).collect();
        h.extend(std::iter::repeat_n(Expr::Const(0.0), self.padding));
        for stage in self.stages.iter().rev() {
            h = match stage {
                ExprStage::Permutation(p) => {
                    let mut out = vec![Expr::Const(0.0); p.len()];
                    for (j, &i) in p.iter().enumerate() {
                        out[i] = h[j].clone();
                    }
                    out
                }
                ExprStage::Block(b) => {
                    let (d1, _) = split_sizes(b.width);
                    let mut map: HashMap<String, Expr> = names("v", 0..d1).into_iter().zip(h.iter().cloned()).collect();
                    let mut u2 = Vec::new();
                    for i in 0..b.width - d1 {
                        let e = Expr::Mul(vec![
                            Expr::sub(h[d1 + i].clone(), b.t2[i].substitute(&map)),
                            Expr::Exp(Box::new(Expr::neg(b.s2[i].substitute(&map)))),
                        ]);
                        u2.push(simplify(&e));
                    }
                    for (i, e) in u2.iter().enumerate() {
                        map.insert(format!("u_{}", d1 + i + 1), e.clone());
                    }
                    let mut out = Vec::with_capacity(b.width);
                    for i in 0..d1 {
                        let e = Expr::Mul(vec![
                            Expr::sub(h[i].clone(), b.t1[i].substitute(&map)),
                            Expr::Exp(Box::new(Expr::neg(b.s1[i].substitute(&map)))),
                        ]);
                        out.push(simplify(&e));
                    }
                    out.extend(u2);
                    out
                }
            };
            if h.iter().map(Expr::node_count).sum::<usize>() > budget {
                return None;
            }
        }
        h.truncate(self.input_names.len());
        Some(h)
    }

    /// True when the forward map is exactly `output_i = input_i`.
    pub fn is_identity(&self) -> bool {
        self.output_names.len() == self.input_names.len()
            && self.flattened_forward(FLATTEN_BUDGET).is_some_and(|h| {
                h.iter()
                    .zip(&self.input_names)
                    .all(|(e, n)| matches!(e, Expr::Var(v) if v == n))
                    && h[self.input_names.len()..].iter().all(|e| e.as_const() == Some(0.0))
            })
    }

    /// Block-by-block text: the forward chain, the mirrored inverse chain,
    /// and the flattened closed forms when they fit the budget.
    pub fn render(&self, digits: usize) -> String {
        let mut out = String::new();
        if self.is_identity() {
            let _ = writeln!(out, "z = x");
            return out;
        }
        let blocks = self.stages.iter().filter(|s| matches!(s, ExprStage::Block(_))).count();
        let _ = writeln!(
            out,
            "input: ({}){}",
            self.input_names.join(", "),
            if self.padding > 0 {
                format!(" padded with {} zero(s)", self.padding)
            } else {
                String::new()
            }
        );
        if !self.condition_names.is_empty() {
            let _ = writeln!(out, "condition: ({})", self.condition_names.join(", "));
        }
        let mut k = 0;
        for stage in &self.stages {
            match stage {
                ExprStage::Block(b) => {
                    k += 1;
                    let _ = writeln!(out, "\nblock {k} of {blocks}");
                    render_block(&mut out, b, digits);
                }
                ExprStage::Permutation(p) => {
                    let pairs: Vec<String> = p
                        .iter()
                        .enumerate()
                        .map(|(j, i)| format!("u_{} = o_{}", j + 1, i + 1))
                        .collect();
                    let _ = writeln!(out, "\npermutation: {}", pairs.join(", "));
                }
            }
        }
        let outputs: Vec<String> = self
            .full_output_names()
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{n} = o_{}", i + 1))
            .collect();
        let _ = writeln!(out, "\noutput: {}", outputs.join(", "));

        if let Some(fwd) = self.flattened_forward(FLATTEN_BUDGET) {
            let _ = writeln!(out, "\nclosed form:");
            for (n, e) in self.full_output_names().iter().zip(&fwd) {
                let _ = writeln!(out, "  {n} = {}", e.render(digits));
            }
        }
        if let Some(inv) = self.flattened_inverse(FLATTEN_BUDGET) {
            let _ = writeln!(out, "\nclosed-form inverse:");
            for (n, e) in self.input_names.iter().zip(&inv) {
                let _ = writeln!(out, "  {n} = {}", e.render(digits));
            }
        }
        out
    }
}

fn half(prefix: &str, range: std::ops::Range<usize>) -> String {
    let n = names(prefix, range);
    if n.len() == 1 {
        n[0].clone()
    } else {
        format!("({})", n.join(", "))
    }
}

fn render_block(out: &mut String, b: &BlockExpressions, digits: usize) {
    let (d1, _) = split_sizes(b.width);
    let cond = if b.condition_width > 0 { ", y" } else { "" };
    let (u1, u2) = (half("u", 0..d1), half("u", d1..b.width));
    let (v1, v2) = (half("v", 0..d1), half("v", d1..b.width));
    let list = |out: &mut String, label: &str, arg: &str, es: &[Expr]| {
        for (i, e) in es.iter().enumerate() {
            let idx = if es.len() > 1 {
                format!("[{}]", i + 1)
            } else {
                String::new()
            };
            let _ = writeln!(out, "  {label}{idx}({arg}{cond}) = {}", e.render(digits));
        }
    };
    list(out, "s_1", &u2, &b.s1);
    list(out, "t_1", &u2, &b.t1);
    let _ = writeln!(out, "  {v1} = {u1}·exp(s_1) + t_1");
    list(out, "s_2", &v1, &b.s2);
    list(out, "t_2", &v1, &b.t2);
    let _ = writeln!(out, "  {v2} = {u2}·exp(s_2) + t_2");
    let o = names("o", 0..b.width).join(", ");
    let v = names("v", 0..b.width).join(", ");
    let _ = writeln!(out, "  ({o}) = ({v})");
    let _ = writeln!(
        out,
        "  inverse: {u2} = ({v2} - t_2)·exp(-s_2), {u1} = ({v1} - t_1)·exp(-s_1)"
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::PermutationLayer;
    use crate::eql::{ActivationLibrary, Dense};
    use crate::flows::{FlowModel, IsrModel};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn eval_basics() {
        assert_eq!(Expr::Const(2.5).eval(&HashMap::new()).unwrap(), 2.5);
        let e = Expr::Sin(Box::new(Expr::Mul(vec![Expr::Const(TAU), Expr::var("w")])));
        assert!((e.eval(&env(&[("w", 0.25)])).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            Expr::var("q").eval(&HashMap::new()),
            Err(SymbolicError::UnboundVariable(_))
        ));
    }

    #[test]
    fn simplify_examples() {
        let x = Expr::var("x");
        let e = Expr::Add(vec![Expr::Mul(vec![Expr::Const(0.0), x.clone()]), Expr::Const(4.0)]);
        assert_eq!(simplify(&e), Expr::Const(4.0));
        assert_eq!(simplify(&Expr::Mul(vec![Expr::Const(1.0), x.clone()])), x);
        assert_eq!(simplify(&Expr::Add(vec![x.clone(), Expr::Const(0.0)])), x);
        // 2·(3x + 1) → 6x + 2
        let nested = Expr::Mul(vec![
            Expr::Const(2.0),
            Expr::Add(vec![Expr::Mul(vec![Expr::Const(3.0), x.clone()]), Expr::Const(1.0)]),
        ]);
        assert_eq!(
            simplify(&nested),
            Expr::Add(vec![Expr::Mul(vec![Expr::Const(6.0), x.clone()]), Expr::Const(2.0)])
        );
        // x + 2x → 3x
        let like = Expr::Add(vec![x.clone(), Expr::Mul(vec![Expr::Const(2.0), x.clone()])]);
        assert_eq!(simplify(&like), Expr::Mul(vec![Expr::Const(3.0), x]));
    }

    #[test]
    fn formatting() {
        assert_eq!(format_sig(1.1612, 3), "1.16");
        assert_eq!(format_sig(-9.3874, 3), "-9.39");
        assert_eq!(format_sig(3.0, 3), "3.00");
        assert_eq!(format_sig(0.31623, 3), "0.316");
        assert_eq!(format_sig(9.996, 3), "10.0");
        assert_eq!(format_sig(123456.0, 3), "1.23e5");
        let e = simplify(&Expr::Add(vec![
            Expr::Mul(vec![Expr::Const(3.19), Expr::var("x_2")]),
            Expr::Const(-9.39),
        ]));
        assert_eq!(e.to_string(), "3.19·x_2 - 9.39");
    }

    fn random_net(seed: u64, layers: usize) -> EqlNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib: ActivationLibrary = "1, id*2, sq*2, sin*2, sig, exp, mul*2".parse().unwrap();
        let mut net = EqlNetwork::new(3, 2, layers, &lib, &mut rng);
        net.readout = Dense::glorot(lib.output_width(), 2, &mut rng);
        net.for_each_param_mut(&mut |_, m| m.mapv_inplace(|w| w + rng.random_range(-0.05..0.05)));
        net
    }

    #[test]
    fn extraction_matches_pruned_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..4 {
            let net = random_net(seed, 1 + seed as usize % 2);
            let pruned = prune_network(&net, 0.05, 0.01);
            let exprs = extract(&net, &vars("x", 0..3), 0.05, 0.01);
            for _ in 0..200 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let want = pruned.forward(&x).unwrap();
                let e = env(&[("x_1", x[0]), ("x_2", x[1]), ("x_3", x[2])]);
                for (ex, w) in exprs.iter().zip(&want) {
                    let got = ex.eval(&e).unwrap();
                    assert!((got - w).abs() < 1e-9 * w.abs().max(1.0), "{got} vs {w}");
                }
            }
        }
    }

    #[test]
    fn zero_network_is_its_bias() {
        let net = EqlNetwork::linear(Array2::zeros((2, 1)), array![[0.7]]);
        assert_eq!(extract(&net, &vars("x", 0..2), 0.0, 0.0), vec![Expr::Const(0.7)]);
    }

    #[test]
    fn simplify_preserves_value_and_size() {
        let net = random_net(7, 2);
        let raw: Vec<Expr> = extract(&net, &vars("x", 0..3), 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for e in raw {
            let wrapped = Expr::Mul(vec![Expr::Const(1.0), Expr::Add(vec![e.clone(), Expr::Const(0.0)])]);
            let s = simplify(&wrapped);
            assert!(s.node_count() <= wrapped.node_count());
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let en = env(&[("x_1", x[0]), ("x_2", x[1]), ("x_3", x[2])]);
                let a = wrapped.eval(&en).unwrap();
                let b = s.eval(&en).unwrap();
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let e = extract(&random_net(3, 2), &vars("x", 0..3), 0.0, 0.0);
        let json = serde_json::to_string(&e).unwrap();
        let back: Vec<Expr> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
        assert!(json.contains("\"op\""));
    }

    #[test]
    fn identity_model_renders_z_equals_x() {
        let m = Model::Flow(FlowModel::from_stack(InvertibleStack::empty(2, 0, 0)));
        assert_eq!(compose_model(&m, 0.0, 0.0).render(3), "z = x\n");
        let mut stack = InvertibleStack::empty(2, 0, 0);
        stack.stages.push(Stage::Coupling(CouplingBlock::identity(2, 0, 2.0)));
        let m = Model::Flow(FlowModel::from_stack(stack));
        assert_eq!(compose_model(&m, 0.0, 0.0).render(3), "z = x\n");
    }

    fn gaussian_model() -> Model {
        let c = 2.0;
        let raw = |s: f64| c * (s / c).atanh();
        let konst = |v: f64| EqlNetwork::linear(Array2::zeros((1, 1)), array![[v]]);
        let block = CouplingBlock {
            width: 2,
            condition_width: 0,
            clamp: c,
            s1: konst(raw(1.16)),
            t1: konst(0.0),
            s2: konst(raw(1.14)),
            t2: konst(-9.39),
        };
        let mut stack = InvertibleStack::empty(2, 0, 0);
        stack.stages.push(Stage::Coupling(block));
        Model::Flow(FlowModel::from_stack(stack))
    }

    #[test]
    fn gaussian_closed_forms() {
        let set = compose_model(&gaussian_model(), 0.0, 0.0);
        let text = set.render(3);
        assert!(text.contains("s_1(u_2) = 1.16"), "{text}");
        assert!(text.contains("t_2(v_1) = -9.39"), "{text}");

        let fwd = set.flattened_forward(FLATTEN_BUDGET).unwrap();
        let (c0, k0) = fwd[0].affine_form().unwrap();
        assert_eq!(c0, 0.0);
        assert!((k0["x_1"] - 1.16f64.exp()).abs() < 1e-12);
        let (c1, k1) = fwd[1].affine_form().unwrap();
        assert!((c1 + 9.39).abs() < 1e-12);
        assert!((k1["x_2"] - 1.14f64.exp()).abs() < 1e-12);

        let inv = set.flattened_inverse(FLATTEN_BUDGET).unwrap();
        let (c, k) = inv[1].affine_form().unwrap();
        assert!((k["z_2"] - (-1.14f64).exp()).abs() < 1e-12);
        assert!((c - 9.39 * (-1.14f64).exp()).abs() < 1e-12);

        let x = set.eval_inverse(&[0.0, 0.0], &[]).unwrap();
        assert!(x[0].abs() < 1e-15 && (x[1] - 3.00).abs() < 0.01);
    }

    #[test]
    fn chain_matches_model_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let arch = crate::flows::Architecture {
            blocks: 3,
            hidden_layers: 1,
            library: ActivationLibrary::default(),
            clamp: 2.0,
        };
        let mut model = Model::Isr(IsrModel::new(4, 2, 1, 0.01, &arch, 2).unwrap());
        model
            .stack_mut()
            .for_each_param_mut(&mut |_, m| m.mapv_inplace(|_| rng.random_range(-0.3..0.3)));
        let pruned = prune_model(&model, 0.1, 0.0);
        let set = compose_model(&model, 0.1, 0.0);
        let compiled = set.compile().unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (want, _) = pruned.stack().forward(&x).unwrap();
            let got = compiled.forward(&x, &[]).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
            }
            let back = compiled.inverse(&got, &[]).unwrap();
            for (a, b) in back.iter().zip(&x) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let json = serde_json::to_string(&set).unwrap();
        let back: InvertibleExpressionSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn permutation_stage_text() {
        let mut stack = InvertibleStack::empty(2, 0, 0);
        stack
            .stages
            .push(Stage::Permutation(PermutationLayer::new(vec![1, 0]).unwrap()));
        let m = Model::Flow(FlowModel::from_stack(stack));
        let set = compose_model(&m, 0.0, 0.0);
        assert!(!set.is_identity());
        assert!(set.render(3).contains("u_1 = o_2, u_2 = o_1"));
        assert_eq!(set.eval_forward(&[1.0, 2.0], &[]).unwrap(), vec![2.0, 1.0]);
    }
}
