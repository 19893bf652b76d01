//! Invertible symbolic regression.
//!
//! Affine coupling flows whose scale and shift subnetworks are equation
//! learners, trained by maximum likelihood for density estimation and for
//! probabilistic inverse problems, with the learned map read back as
//! closed-form invertible expressions.
//!
//! The crate is layered bottom-up: [`autodiff`] (tape), [`eql`]
//! (subnetworks), [`coupling`] (invertible blocks and stacks), [`flows`]
//! (models and losses), [`train`], [`symbolic`] (extraction),
//! [`benchmarks`], and the run-level [`config`], [`io`] and
//! [`experiment`] modules used by the command-line tool.

pub mod autodiff;
pub mod benchmarks;
pub mod config;
pub mod coupling;
pub mod eql;
pub mod experiment;
pub mod flows;
pub mod io;
pub mod rng;
pub mod selftest;
pub mod symbolic;
pub mod train;

pub use autodiff::{Matrix, Tape, TapeError};
pub use benchmarks::{BenchError, DistributionKind, KinematicsSpec, MetricsReport};
pub use config::{ConfigError, ExperimentKind, RunConfig};
pub use coupling::{CouplingBlock, CouplingError, InvertibleStack, PermutationLayer};
pub use eql::{Activation, ActivationLibrary, EqlError, EqlNetwork};
pub use experiment::ExperimentError;
pub use flows::{CisrModel, Dataset, FlowError, FlowModel, IsrModel, Model};
pub use io::{IoError, ModelFile};
pub use symbolic::{Expr, InvertibleExpressionSet, SymbolicError};
pub use train::{TrainConfig, TrainError, TrainHistory};

/// Any error the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
