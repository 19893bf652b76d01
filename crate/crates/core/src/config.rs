//! Run configuration: one TOML file describes the experiment, the model
//! architecture, the training schedule and the benchmark.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::{DistributionKind, KinematicsSpec, DEFAULT_EPS, DEFAULT_TARGET_Y};
use crate::coupling::DEFAULT_CLAMP;
use crate::eql::ActivationLibrary;
use crate::flows::{Architecture, DEFAULT_PAD_WEIGHT, DEFAULT_SIGMA2};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// What the model maps and how it is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Normalizing flow on unlabeled samples.
    Density,
    /// `x → (y, z)` with a supervised observation block.
    Inverse,
    /// `x → z` with `y` fed to every subnetwork.
    ConditionalInverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Gaussian,
    Banana,
    Ring,
    Mog,
    Kinematics,
}

impl BenchmarkKind {
    pub fn distribution(self) -> Option<DistributionKind> {
        Some(match self {
            Self::Gaussian => DistributionKind::Gaussian,
            Self::Banana => DistributionKind::Banana,
            Self::Ring => DistributionKind::Ring,
            Self::Mog => DistributionKind::Mog,
            Self::Kinematics => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of coupling blocks.
    pub blocks: usize,
    /// Hidden layers per subnetwork.
    pub hidden_layers: usize,
    pub library: ActivationLibrary,
    /// Soft-clamp bound of the log-scales.
    pub clamp: f64,
    /// Extra zero-valued slots appended to the input.
    pub padding: usize,
    /// Observation noise of the supervised loss.
    pub sigma2: f64,
    pub pad_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 1,
            hidden_layers: 2,
            library: ActivationLibrary::default(),
            clamp: DEFAULT_CLAMP,
            padding: 0,
            sigma2: DEFAULT_SIGMA2,
            pad_weight: DEFAULT_PAD_WEIGHT,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            blocks: self.blocks,
            hidden_layers: self.hidden_layers,
            library: self.library.clone(),
            clamp: self.clamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub kind: BenchmarkKind,
    /// Training set size.
    pub n_train: usize,
    /// Model samples drawn for evaluation.
    pub n_eval: usize,
    /// Reference samples (fresh target draws or oracle posterior).
    pub n_reference: usize,
    pub kinematics: KinematicsSpec,
    pub target_y: [f64; 2],
    pub eps: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            kind: BenchmarkKind::Gaussian,
            n_train: 10_000,
            n_eval: 10_000,
            n_reference: 10_000,
            kinematics: KinematicsSpec::default(),
            target_y: DEFAULT_TARGET_Y,
            eps: DEFAULT_EPS,
        }
    }
}

/// Tolerances used when reading expressions off a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Weights below this magnitude are dropped.
    pub prune_tol: f64,
    /// Biases below this magnitude are dropped.
    pub const_tol: f64,
    /// Significant digits in rendered text.
    pub digits: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            prune_tol: 0.0,
            const_tol: 0.0,
            digits: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Training schedule with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let m = &self.model;
        if m.blocks == 0 {
            return bad("model.blocks must be at least 1".into());
        }
        if !(m.clamp > 0.0 && m.clamp.is_finite()) {
            return bad(format!("model.clamp must be positive, got {}", m.clamp));
        }
        if !(m.sigma2 > 0.0 && m.sigma2.is_finite()) {
            return bad(format!("model.sigma2 must be positive, got {}", m.sigma2));
        }
        if !(m.pad_weight >= 0.0 && m.pad_weight.is_finite()) {
            return bad(format!("model.pad_weight must be non-negative, got {}", m.pad_weight));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let b = &self.benchmark;
        let kinematic = b.kind == BenchmarkKind::Kinematics;
        match self.experiment {
            ExperimentKind::Density if kinematic => {
                return bad("a density experiment needs a 2-D target, not kinematics".into());
            }
            ExperimentKind::Inverse | ExperimentKind::ConditionalInverse if !kinematic => {
                return bad("inverse experiments need benchmark.kind = \"kinematics\"".into());
            }
            _ => {}
        }
        if b.n_train == 0 {
            return bad("benchmark.n_train must be positive".into());
        }
        if b.n_eval < 2 || b.n_reference < 2 {
            return bad("benchmark.n_eval and benchmark.n_reference must be at least 2".into());
        }
        if !(b.eps > 0.0 && b.eps.is_finite()) {
            return bad(format!("benchmark.eps must be positive, got {}", b.eps));
        }
        if !b.target_y.iter().all(|v| v.is_finite()) {
            return bad("benchmark.target_y must be finite".into());
        }
        let k = &b.kinematics;
        if !k.prior_var.iter().all(|v| *v > 0.0 && v.is_finite()) || !k.lengths.iter().all(|v| v.is_finite()) {
            return bad("benchmark.kinematics needs finite lengths and positive prior variances".into());
        }
        let e = &self.extract;
        if !(e.prune_tol >= 0.0 && e.const_tol >= 0.0 && e.prune_tol.is_finite() && e.const_tol.is_finite()) {
            return bad("extract tolerances must be finite and non-negative".into());
        }
        if e.digits == 0 || e.digits > 17 {
            return bad("extract.digits must lie in 1..=17".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "experiment = \"density\"\n";

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.benchmark.kind, BenchmarkKind::Gaussian);
        assert_eq!(c.train_config().seed, 0);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.seed = 9;
        c.model.library = "id*2, sq".parse().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys() {
        for text in [
            "experiment = \"density\"\ncolour = 1\n",
            "experiment = \"density\"\n[model]\nblock = 2\n",
            "experiment = \"density\"\n[train]\nepoch = 2\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(ConfigError::Parse(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn rejects_invalid_values() {
        for text in [
            "experiment = \"inverse\"\n",
            "experiment = \"density\"\n[benchmark]\nkind = \"kinematics\"\n",
            "experiment = \"density\"\n[train]\nbatch_size = 0\n",
            "experiment = \"density\"\n[model]\nblocks = 0\n",
            "experiment = \"density\"\n[model]\nsigma2 = -1.0\n",
            "experiment = \"density\"\n[benchmark]\neps = 0.0\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(ConfigError::Invalid(_))),
                "{text}"
            );
        }
        assert!(RunConfig::from_toml("experiment = \"sideways\"\n").is_err());
        assert!(RunConfig::from_toml("[model]\nblocks = 1\n").is_err());
    }
}
