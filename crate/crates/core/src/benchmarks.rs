//! Benchmark problems and evaluation metrics: four 2-D target densities,
//! the planar-arm inverse-kinematics problem with its rejection-sampling
//! ground truth, the kernel MMD and the re-simulation error.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::flows::Dataset;
use crate::rng::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("sample count must be positive")]
    EmptySample,
    #[error("unknown distribution `{0}`")]
    UnknownDistribution(String),
    #[error("eps must be positive and finite, got {0}")]
    InvalidEps(f64),
    #[error("acceptance rate {rate:.3e} after {draws} draws is below 1e-7; raise eps or move y* closer to the prior")]
    AcceptanceTooLow { rate: f64, draws: u64 },
    #[error("MMD needs at least two samples per set, got {a} and {b}")]
    TooFewSamples { a: usize, b: usize },
    #[error("sample sets have widths {a} and {b}")]
    WidthMismatch { a: usize, b: usize },
    #[error("kinematics expects width {expected}, got {got}")]
    Width { expected: usize, got: usize },
}

/// The 2-D density-estimation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    /// `N([0, 3], 0.1·I)`.
    Gaussian,
    /// `x = (z₁, z₁²/2 + z₂/2 − 1)` with `z ~ N(0, I)`.
    Banana,
    /// Radius `N(2, 0.1)` (variance), angle uniform.
    Ring,
    /// Equal mixture of `N((±2, ±2), 0.16·I)`.
    Mog,
}

impl FromStr for DistributionKind {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "gaussian" => Self::Gaussian,
            "banana" => Self::Banana,
            "ring" => Self::Ring,
            "mog" => Self::Mog,
            other => return Err(BenchError::UnknownDistribution(other.into())),
        })
    }
}

pub const GAUSSIAN_MEAN: [f64; 2] = [0.0, 3.0];
pub const GAUSSIAN_VAR: f64 = 0.1;
pub const RING_RADIUS: f64 = 2.0;
pub const RING_RADIUS_VAR: f64 = 0.1;
pub const MOG_CENTER: f64 = 2.0;
pub const MOG_VAR: f64 = 0.16;

/// Rows per independently seeded chunk of a target sample.
const TARGET_CHUNK: usize = 4096;

/// `n` i.i.d. draws from the training-data stream of `seed`.
pub fn sample_target(kind: DistributionKind, n: usize, seed: u64) -> Result<Matrix, BenchError> {
    sample_target_from(kind, n, seed, Purpose::Data)
}

/// `n` i.i.d. draws, chunked so that chunk `k` comes from the
/// `(seed, purpose, k)` stream.
pub fn sample_target_from(kind: DistributionKind, n: usize, seed: u64, purpose: Purpose) -> Result<Matrix, BenchError> {
    chunked_rows(n, seed, purpose, |rng| draw(kind, rng))
}

fn chunked_rows<const W: usize>(
    n: usize,
    seed: u64,
    purpose: Purpose,
    f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> [f64; W] + Sync,
) -> Result<Matrix, BenchError> {
    if n == 0 {
        return Err(BenchError::EmptySample);
    }
    let rows: Vec<[f64; W]> = (0..n.div_ceil(TARGET_CHUNK))
        .into_par_iter()
        .flat_map_iter(|k| {
            let m = TARGET_CHUNK.min(n - k * TARGET_CHUNK);
            let mut rng = rng::stream(seed, purpose, k as u64);
            (0..m).map(|_| f(&mut rng)).collect::<Vec<_>>()
        })
        .collect();
    Ok(Array2::from_shape_fn((n, W), |(i, j)| rows[i][j]))
}

fn draw<R: Rng + ?Sized>(kind: DistributionKind, rng: &mut R) -> [f64; 2] {
    let mut n = || -> f64 { StandardNormal.sample(rng) };
    match kind {
        DistributionKind::Gaussian => {
            let sd = GAUSSIAN_VAR.sqrt();
            let (a, b) = (n(), n());
            [GAUSSIAN_MEAN[0] + sd * a, GAUSSIAN_MEAN[1] + sd * b]
        }
        DistributionKind::Banana => {
            let (z1, z2) = (n(), n());
            [z1, 0.5 * z1 * z1 + 0.5 * z2 - 1.0]
        }
        DistributionKind::Ring => {
            let r = RING_RADIUS + RING_RADIUS_VAR.sqrt() * n();
            let phi = TAU * rng.random::<f64>();
            [r * phi.cos(), r * phi.sin()]
        }
        DistributionKind::Mog => {
            let c: u8 = rng.random_range(0..4);
            let sd = MOG_VAR.sqrt();
            let cx = if c & 1 == 0 { -MOG_CENTER } else { MOG_CENTER };
            let cy = if c & 2 == 0 { -MOG_CENTER } else { MOG_CENTER };
            let mut n = || -> f64 { StandardNormal.sample(rng) };
            [cx + sd * n(), cy + sd * n()]
        }
    }
}

/// Exact log-density of the Gaussian target.
pub fn gaussian_log_density(x: &[f64]) -> f64 {
    let q: f64 = x.iter().zip(GAUSSIAN_MEAN).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * q / GAUSSIAN_VAR - (2.0 * PI * GAUSSIAN_VAR).ln()
}

/// Planar arm on a vertical rail: segment lengths and the Gaussian prior on
/// `(rail offset, three joint angles)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicsSpec {
    pub lengths: [f64; 3],
    pub prior_var: [f64; 4],
}

impl Default for KinematicsSpec {
    fn default() -> Self {
        Self {
            lengths: [0.5, 0.5, 1.0],
            prior_var: [0.25 * 0.25, 0.25, 0.25, 0.25],
        }
    }
}

/// Default observation for posterior experiments.
pub const DEFAULT_TARGET_Y: [f64; 2] = [0.0, 1.5];
/// Default oracle acceptance radius.
pub const DEFAULT_EPS: f64 = 0.02;
/// Acceptance rate below which the oracle gives up.
pub const MIN_ACCEPTANCE: f64 = 1e-7;
/// Prior draws per independently seeded oracle chunk.
pub const ORACLE_CHUNK: u64 = 1 << 20;
/// Chunks evaluated in parallel per oracle round; fixed so that results do
/// not depend on the thread count.
const ORACLE_ROUND: u64 = 16;
/// Draws after which a too-low acceptance rate aborts the oracle.
const ORACLE_PATIENCE: u64 = 100_000_000;

impl KinematicsSpec {
    /// End point of the arm:
    /// `y₁ = x₁ + Σ ℓₖ sin(x₂ + … + x_{k+1})`, `y₂ = Σ ℓₖ cos(…)`.
    pub fn forward(&self, x: &[f64]) -> [f64; 2] {
        let [l1, l2, l3] = self.lengths;
        let a1 = x[1];
        let a2 = a1 + x[2];
        let a3 = a2 + x[3];
        let (s1, c1) = a1.sin_cos();
        let (s2, c2) = a2.sin_cos();
        let (s3, c3) = a3.sin_cos();
        [x[0] + l1 * s1 + l2 * s2 + l3 * s3, l1 * c1 + l2 * c2 + l3 * c3]
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix, BenchError> {
        if x.ncols() != 4 {
            return Err(BenchError::Width {
                expected: 4,
                got: x.ncols(),
            });
        }
        let mut y = Array2::zeros((x.nrows(), 2));
        for (row, mut out) in x.axis_iter(Axis(0)).zip(y.axis_iter_mut(Axis(0))) {
            let r = self.forward(row.as_slice().unwrap_or(&row.to_vec()));
            out[0] = r[0];
            out[1] = r[1];
        }
        Ok(y)
    }

    fn prior_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        let mut x = [0.0; 4];
        for (v, var) in x.iter_mut().zip(self.prior_var) {
            let z: f64 = StandardNormal.sample(rng);
            *v = var.sqrt() * z;
        }
        x
    }

    /// `n` prior draws and their end points, from the training-data stream.
    pub fn dataset(&self, n: usize, seed: u64) -> Result<Dataset, BenchError> {
        self.dataset_from(n, seed, Purpose::Data)
    }

    pub fn dataset_from(&self, n: usize, seed: u64, purpose: Purpose) -> Result<Dataset, BenchError> {
        let x = chunked_rows(n, seed, purpose, |rng| self.prior_draw(rng))?;
        let y = self.forward_batch(&x)?;
        Ok(Dataset { x, y: Some(y) })
    }

    /// Ground-truth posterior at `y_star`: the first `n_keep` prior draws
    /// (in stream order) whose end point lies within `eps` of `y_star`.
    pub fn rejection_sample(
        &self,
        y_star: [f64; 2],
        eps: f64,
        n_keep: usize,
        seed: u64,
    ) -> Result<RejectionResult, BenchError> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(BenchError::InvalidEps(eps));
        }
        let eps2 = eps * eps;
        let mut accepted: Vec<[f64; 4]> = Vec::with_capacity(n_keep);
        let mut draws: u64 = 0;
        let mut next_chunk: u64 = 0;
        while accepted.len() < n_keep {
            let round: Vec<Vec<(u64, [f64; 4])>> = (next_chunk..next_chunk + ORACLE_ROUND)
                .into_par_iter()
                .map(|k| {
                    let mut rng = rng::stream(seed, Purpose::Oracle, k);
                    let mut keep = Vec::new();
                    for i in 0..ORACLE_CHUNK {
                        let x = self.prior_draw(&mut rng);
                        let y = self.forward(&x);
                        let d = (y[0] - y_star[0]).powi(2) + (y[1] - y_star[1]).powi(2);
                        if d < eps2 {
                            keep.push((i, x));
                        }
                    }
                    keep
                })
                .collect();
            next_chunk += ORACLE_ROUND;
            for chunk in round {
                if accepted.len() >= n_keep {
                    break;
                }
                let need = n_keep - accepted.len();
                if chunk.len() >= need {
                    draws += chunk[need - 1].0 + 1;
                } else {
                    draws += ORACLE_CHUNK;
                }
                accepted.extend(chunk.into_iter().take(need).map(|(_, x)| x));
            }
            let rate = accepted.len() as f64 / draws as f64;
            if accepted.len() < n_keep && draws >= ORACLE_PATIENCE && rate < MIN_ACCEPTANCE {
                return Err(BenchError::AcceptanceTooLow { rate, draws });
            }
        }
        let samples = Array2::from_shape_fn((accepted.len(), 4), |(i, j)| accepted[i][j]);
        Ok(RejectionResult {
            acceptance_rate: if draws == 0 {
                1.0
            } else {
                accepted.len() as f64 / draws as f64
            },
            draws,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectionResult {
    pub samples: Matrix,
    /// Accepted over drawn, up to and including the last accepted draw.
    pub acceptance_rate: f64,
    pub draws: u64,
}

/// Bandwidths of the inverse-multiquadric kernel mixture.
pub const MMD_SCALES: [f64; 3] = [0.05, 0.2, 0.9];

/// `Σ_c c / (c + ‖a − b‖²)`.
pub fn imq_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    MMD_SCALES.iter().map(|c| c / (c + d2)).sum()
}

/// Unbiased estimate of the squared MMD with the kernel mixture above.
///
/// Equal-size sets use the paired U-statistic over
/// `h(i, j) = k(aᵢ, aⱼ) + k(bᵢ, bⱼ) − k(aᵢ, bⱼ) − k(aⱼ, bᵢ)`, `i ≠ j`, which
/// is exactly zero for identical sets. Other sizes use the two-sample
/// U-statistic. Both are symmetric in `(a, b)`; the value can dip slightly
/// below zero.
pub fn mmd(a: &Matrix, b: &Matrix) -> Result<f64, BenchError> {
    let (m, n) = (a.nrows(), b.nrows());
    if m < 2 || n < 2 {
        return Err(BenchError::TooFewSamples { a: m, b: n });
    }
    if a.ncols() != b.ncols() {
        return Err(BenchError::WidthMismatch {
            a: a.ncols(),
            b: b.ncols(),
        });
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let row = |x: &ndarray::ArrayView2<f64>, i: usize| -> Vec<f64> { x.row(i).to_vec() };
    let av: Vec<Vec<f64>> = (0..m).map(|i| row(&a.view(), i)).collect();
    let bv: Vec<Vec<f64>> = (0..n).map(|i| row(&b.view(), i)).collect();

    if m == n {
        let rows: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                for j in 0..m {
                    if i != j {
                        let within = imq_kernel(&av[i], &av[j]) + imq_kernel(&bv[i], &bv[j]);
                        let cross = imq_kernel(&av[i], &bv[j]) + imq_kernel(&av[j], &bv[i]);
                        s += within - cross;
                    }
                }
                s
            })
            .collect();
        return Ok(rows.iter().sum::<f64>() / (m * (m - 1)) as f64);
    }

    let within = |x: &[Vec<f64>]| -> f64 {
        let k = x.len();
        let rows: Vec<f64> = (0..k)
            .into_par_iter()
            .map(|i| (0..k).filter(|&j| j != i).map(|j| imq_kernel(&x[i], &x[j])).sum())
            .collect();
        rows.iter().sum::<f64>() / (k * (k - 1)) as f64
    };
    // Order the sets by size so that swapping the arguments gives the same
    // bits.
    let (small, large) = if m < n { (&av, &bv) } else { (&bv, &av) };
    let cross_rows: Vec<f64> = small
        .par_iter()
        .map(|s| large.iter().map(|l| imq_kernel(s, l)).sum())
        .collect();
    let cross = cross_rows.iter().sum::<f64>() / (m * n) as f64;
    let (lo, hi) = (within(small), within(large));
    Ok(lo + hi - 2.0 * cross)
}

/// Mean squared distance between simulated end points and `y_star`.
pub fn resim_error(spec: &KinematicsSpec, samples: &Matrix, y_star: [f64; 2]) -> Result<f64, BenchError> {
    if samples.nrows() == 0 {
        return Err(BenchError::EmptySample);
    }
    let y = spec.forward_batch(samples)?;
    let total: f64 = y
        .axis_iter(Axis(0))
        .map(|r| (r[0] - y_star[0]).powi(2) + (r[1] - y_star[1]).powi(2))
        .sum();
    Ok(total / samples.nrows() as f64)
}

/// Fractions of samples with `x₂ > 0` and `x₂ < 0`.
pub fn x2_sign_split(samples: &Matrix) -> (f64, f64) {
    let n = samples.nrows().max(1) as f64;
    let col = samples.column(1);
    let pos = col.iter().filter(|v| **v > 0.0).count() as f64;
    let neg = col.iter().filter(|v| **v < 0.0).count() as f64;
    (pos / n, neg / n)
}

/// Evaluation summary written as JSON. Field order is the serialized key
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub benchmark: String,
    /// Squared MMD between model and reference samples, clamped at 0.
    pub err_post: Option<f64>,
    /// The unclamped estimate.
    pub err_post_raw: Option<f64>,
    pub err_resim: Option<f64>,
    pub nll: Option<f64>,
    pub n_model_samples: usize,
    pub n_reference_samples: usize,
    pub seed: u64,
    pub target_y: Option<Vec<f64>>,
    pub eps: Option<f64>,
    pub kernel: String,
}

impl MetricsReport {
    pub fn kernel_description() -> String {
        format!("inverse multiquadric mixture sum_c c/(c + d^2), c in {:?}", MMD_SCALES)
    }

    pub fn set_mmd(&mut self, raw: f64) {
        self.err_post_raw = Some(raw);
        self.err_post = Some(raw.max(0.0));
    }
}

/// Standard normal draws shifted by `mean` with standard deviation `sd`,
/// from the evaluation stream; used for reference sets in tests and
/// quadrature checks.
pub fn normal_matrix(n: usize, width: usize, mean: f64, sd: f64, seed: u64) -> Matrix {
    let mut rng = rng::stream(seed, Purpose::Evaluation, 0);
    let d = Normal::new(mean, sd).expect("finite sd");
    Array2::from_shape_simple_fn((n, width), || d.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kinematics_examples() {
        let k = KinematicsSpec::default();
        let close = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12;
        assert!(close(k.forward(&[0.0; 4]), [0.0, 2.0]));
        assert!(close(k.forward(&[1.0, 0.0, 0.0, 0.0]), [1.0, 2.0]));
        assert!(close(k.forward(&[0.0, PI / 2.0, 0.0, 0.0]), [2.0, 0.0]));
    }

    #[test]
    fn kinematics_dataset_statistics() {
        let k = KinematicsSpec::default();
        let d = k.dataset(100_000, 3).unwrap();
        let x1 = d.x.column(0);
        let var = x1.mapv(|v| v * v).mean().unwrap() - x1.mean().unwrap().powi(2);
        assert!((var - 0.0625).abs() < 0.003, "{var}");
        let y = d.y.as_ref().unwrap();
        assert!(y.column(1).iter().all(|v| v.abs() <= 2.0));
        assert!(y.column(1).mean().unwrap() < 2.0);
        assert_eq!(k.dataset(1000, 3).unwrap(), k.dataset(1000, 3).unwrap());
    }

    #[test]
    fn target_statistics() {
        let g = sample_target(DistributionKind::Gaussian, 100_000, 1).unwrap();
        let m = g.mean_axis(Axis(0)).unwrap();
        assert!((m[0] - 0.0).abs() < 0.01 && (m[1] - 3.0).abs() < 0.01, "{m}");
        let r = sample_target(DistributionKind::Ring, 100_000, 2).unwrap();
        let radius = r.map_axis(Axis(1), |p| p.dot(&p).sqrt()).mean().unwrap();
        assert!((radius - 2.0).abs() < 0.01, "{radius}");
        assert_eq!(
            sample_target(DistributionKind::Mog, 5000, 4).unwrap(),
            sample_target(DistributionKind::Mog, 5000, 4).unwrap()
        );
        assert!(sample_target(DistributionKind::Banana, 0, 4).is_err());
    }

    #[test]
    fn mmd_identities() {
        let a = normal_matrix(300, 4, 0.0, 1.0, 1);
        assert_eq!(mmd(&a, &a).unwrap(), 0.0);
        let b = normal_matrix(300, 4, 0.0, 1.0, 2);
        assert_eq!(mmd(&a, &b).unwrap(), mmd(&b, &a).unwrap());
        let shifted = &a + &array![[10.0, 0.0, 0.0, 0.0]];
        assert!(mmd(&a, &shifted).unwrap() > 0.1);
        let c = normal_matrix(200, 4, 0.0, 1.0, 3);
        assert_eq!(mmd(&a, &c).unwrap(), mmd(&c, &a).unwrap());
        assert!(mmd(&a.slice(ndarray::s![..1, ..]).to_owned(), &b).is_err());
    }

    #[test]
    fn resim_examples() {
        let k = KinematicsSpec::default();
        let x = array![[0.0, 0.0, 0.0, 0.0]];
        assert_eq!(resim_error(&k, &x, [0.0, 2.0]).unwrap(), 0.0);
        assert!((resim_error(&k, &x, [0.1, 2.0]).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn oracle_predicates() {
        let k = KinematicsSpec::default();
        let wide = k.rejection_sample([0.0, 1.5], 1e3, 500, 1).unwrap();
        assert_eq!(wide.samples.nrows(), 500);
        assert!(wide.acceptance_rate > 0.99);
        let y = [0.3, 1.6];
        let r = k.rejection_sample(y, 0.2, 200, 5).unwrap();
        assert_eq!(r.samples.nrows(), 200);
        for row in r.samples.axis_iter(Axis(0)) {
            let e = k.forward(row.as_slice().unwrap());
            assert!((e[0] - y[0]).powi(2) + (e[1] - y[1]).powi(2) < 0.04);
        }
        let half = k.rejection_sample(y, 0.1, 200, 5).unwrap();
        assert!(half.acceptance_rate <= r.acceptance_rate);
        assert!(k.rejection_sample(y, 0.0, 10, 5).is_err());
    }
}
