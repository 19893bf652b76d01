//! Fast randomized invariant checks, runnable from the command line on any
//! machine the tool is installed on.

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::benchmarks::{self, KinematicsSpec};
use crate::coupling::{InvertibleStack, StackSpec};
use crate::eql::ActivationLibrary;
use crate::flows::{Architecture, CisrModel, Dataset, FlowModel, IsrModel, Model};
use crate::io::{HistoryDigest, ModelFile};
use crate::rng::{self, Purpose};
use crate::symbolic::compose_stack;
use crate::train::objective_graph;

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Overwrites every parameter with `N(0, scale²)` draws.
pub fn randomize_stack<R: Rng + ?Sized>(stack: &mut InvertibleStack, scale: f64, rng: &mut R) {
    stack.for_each_param_mut(&mut |_, m| {
        m.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
    });
}

/// Random stack with `blocks` blocks on `width` coordinates and fully
/// populated subnetworks.
pub fn random_stack<R: Rng + ?Sized>(
    width: usize,
    condition_width: usize,
    blocks: usize,
    rng: &mut R,
) -> InvertibleStack {
    let spec = StackSpec {
        data_width: width,
        padding: 0,
        condition_width,
        blocks,
        hidden_layers: rng.random_range(1..=2),
        library: ActivationLibrary::default(),
        clamp: 2.0,
        seed: rng.random(),
    };
    let mut stack = InvertibleStack::new(&spec).expect("valid random spec");
    randomize_stack(&mut stack, 0.1, rng);
    stack
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Central-difference Jacobian log-determinant of the stack at `x`.
pub fn numeric_logdet(stack: &InvertibleStack, x: &[f64], step: f64) -> f64 {
    let d = x.len();
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[j] += step;
        lo[j] -= step;
        let (fh, _) = stack.forward(&hi).expect("finite");
        let (fl, _) = stack.forward(&lo).expect("finite");
        for i in 0..d {
            jac[(i, j)] = (fh[i] - fl[i]) / (2.0 * step);
        }
    }
    jac.determinant().abs().ln()
}

/// Round trips and Jacobian log-determinants of `cases` random stacks.
pub fn invertibility(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng::stream(seed, Purpose::Evaluation, 1);
    let (mut worst_rt, mut worst_ld) = (0.0f64, 0.0f64);
    let mut redrawn = 0;
    for _ in 0..cases {
        let (stack, x, o, logdet) = loop {
            let width = rng.random_range(2..=8);
            let stack = random_stack(width, 0, rng.random_range(1..=6), &mut rng);
            let x: Vec<f64> = normal_matrix(1, width, &mut rng).into_raw_vec_and_offset().0;
            match stack.forward(&x) {
                Ok((o, l)) if o.iter().all(|v| v.abs() < BOUNDED) => break (stack, x, o, l),
                _ => redrawn += 1,
            }
        };
        let back = stack.inverse(&o).expect("finite");
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let err = x.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst_rt = worst_rt.max(err);
        if x.len() <= 6 {
            worst_ld = worst_ld.max((numeric_logdet(&stack, &x, 1e-6) - logdet).abs());
        }
    }
    CheckOutcome {
        name: "invertibility",
        passed: worst_rt < 1e-9 && worst_ld < 1e-4,
        detail: format!(
            "{cases} stacks ({redrawn} redrawn for overflow), worst round trip {worst_rt:.2e}, worst logdet gap {worst_ld:.2e}"
        ),
    }
}

/// Random stacks whose outputs exceed this are redrawn: polynomial
/// subnetworks composed over many blocks can overflow for unlucky weights.
const BOUNDED: f64 = 1e3;

/// Random small model of each variant with random weights and a random
/// batch to differentiate.
pub fn random_model_and_batch<R: Rng + ?Sized>(variant: usize, rng: &mut R) -> (Model, Dataset) {
    let arch = Architecture {
        blocks: rng.random_range(1..=2),
        hidden_layers: 1,
        library: ActivationLibrary::default(),
        clamp: 2.0,
    };
    let padding = rng.random_range(0..=2);
    let n = rng.random_range(3..=6);
    let seed = rng.random();
    let (mut model, data) = match variant % 3 {
        0 => {
            let d = rng.random_range(1..=3);
            let m = FlowModel::new(d, padding, &arch, seed).expect("valid");
            (Model::Flow(m), Dataset::unlabeled(normal_matrix(n, d, rng)))
        }
        1 => {
            let (dx, dy) = (rng.random_range(2..=4), 1);
            let m = IsrModel::new(dx, dy, padding, 0.5, &arch, seed).expect("valid");
            let data = Dataset::labeled(normal_matrix(n, dx, rng), normal_matrix(n, dy, rng)).expect("rows");
            (Model::Isr(m), data)
        }
        _ => {
            let (dx, dy) = (rng.random_range(2..=3), rng.random_range(1..=2));
            let m = CisrModel::new(dx, dy, padding, &arch, seed).expect("valid");
            let data = Dataset::labeled(normal_matrix(n, dx, rng), normal_matrix(n, dy, rng)).expect("rows");
            (Model::Cisr(m), data)
        }
    };
    randomize_stack(model.stack_mut(), 0.2, rng);
    model.set_pad_weight(rng.random_range(0.5..2.0));
    (model, data)
}

/// Analytic against central-difference gradients of the full training
/// objective (likelihood, L0.5 and pad terms).
pub fn gradients(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng::stream(seed, Purpose::Evaluation, 2);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for case in 0..cases {
        let (model, data) = random_model_and_batch(case, &mut rng);
        let lambda = rng.random_range(1e-3..1e-1);
        let mut g = objective_graph(&model, &data, lambda, 0.05).expect("graph");
        let ok = g.tape.forward_eval(&g.inputs).is_ok();
        match ok.then(|| g.tape.finite_difference_check(g.loss, 1e-5)) {
            Some(Ok(e)) => worst = worst.max(e),
            _ => failures += 1,
        }
    }
    CheckOutcome {
        name: "gradients",
        passed: failures == 0 && worst < 1e-4,
        detail: format!("{cases} objectives, worst relative gap {worst:.2e}, {failures} evaluation failures"),
    }
}

/// MMD identities and the kinematics bound.
pub fn metrics(seed: u64) -> CheckOutcome {
    let mut rng = rng::stream(seed, Purpose::Evaluation, 3);
    let a = normal_matrix(300, 4, &mut rng);
    let b = normal_matrix(250, 4, &mut rng);
    let self_mmd = benchmarks::mmd(&a, &a).expect("valid sets");
    let ab = benchmarks::mmd(&a, &b).expect("valid sets");
    let ba = benchmarks::mmd(&b, &a).expect("valid sets");
    let k = KinematicsSpec::default();
    let x = normal_matrix(2000, 4, &mut rng) * 3.0;
    let y = k.forward_batch(&x).expect("width 4");
    let reach = y.column(1).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    CheckOutcome {
        name: "metrics",
        passed: self_mmd.abs() <= 1e-6 && (ab - ba).abs() <= 1e-12 && reach <= 2.0 + 1e-12,
        detail: format!(
            "mmd(A,A) = {self_mmd:.1e}, asymmetry {:.1e}, max |y_2| = {reach:.4}",
            (ab - ba).abs()
        ),
    }
}

/// Save/load of a random model reproduces its outputs bit for bit.
pub fn model_file(seed: u64) -> CheckOutcome {
    let mut rng = rng::stream(seed, Purpose::Evaluation, 4);
    let (model, data) = random_model_and_batch(1, &mut rng);
    let cfg = crate::config::RunConfig::from_toml("experiment = \"density\"\n").expect("valid");
    let file = ModelFile::new(cfg, model, HistoryDigest::default());
    let back = file.to_json().and_then(|t| ModelFile::from_json(&t));
    let passed = match back {
        Ok(back) => {
            let bits = |m: &Model| -> Vec<u64> {
                let (o, l) = m.stack().forward_batch(&data.x, None).expect("finite");
                o.iter().chain(l.iter()).map(|v| v.to_bits()).collect()
            };
            back == file && bits(&back.model) == bits(&file.model)
        }
        Err(_) => false,
    };
    CheckOutcome {
        name: "model-file",
        passed,
        detail: "JSON round trip of a random model".into(),
    }
}

/// Extracted expressions agree with the network forward and inverse maps.
pub fn extraction(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng::stream(seed, Purpose::Evaluation, 5);
    let (mut worst_fwd, mut worst_inv) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let width = rng.random_range(2..=4);
        let stack = random_stack(width, 0, rng.random_range(1..=3), &mut rng);
        let names = |p: &str| (1..=width).map(|i| format!("{p}_{i}")).collect::<Vec<_>>();
        let set = compose_stack(&stack, names("x"), names("z"), 0.0, 0.0);
        let compiled = set.compile().expect("bound variables");
        let x = normal_matrix(20, width, &mut rng);
        let (o, _) = stack.forward_batch(&x, None).expect("finite");
        for (xr, or) in x.axis_iter(Axis(0)).zip(o.axis_iter(Axis(0))) {
            let xr = xr.to_vec();
            let f = compiled.forward(&xr, &[]).expect("width");
            worst_fwd = worst_fwd.max(f.iter().zip(or.iter()).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
            let back = compiled.inverse(&f, &[]).expect("width");
            worst_inv = worst_inv.max(back.iter().zip(&xr).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
        }
    }
    CheckOutcome {
        name: "extraction",
        passed: worst_fwd < 1e-9 && worst_inv < 1e-6,
        detail: format!("{cases} stacks, forward gap {worst_fwd:.2e}, inverse round trip {worst_inv:.2e}"),
    }
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        invertibility(200, seed),
        gradients(15, seed),
        metrics(seed),
        model_file(seed),
        extraction(20, seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for outcome in run_all(7) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
