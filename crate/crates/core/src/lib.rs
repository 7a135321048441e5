//! Two-level neural networks viewed as feature populations.
//!
//! The crate trains finite particle ensembles with (noisy) gradient descent,
//! integrates the matching mean-field Fokker-Planck dynamics on a 2-D grid,
//! measures feature-distribution efficiency with the sampling-variance
//! criterion, verifies the closed-form stationary laws of the dynamics, and
//! runs the feature-repopulation pipeline (resample a trained hidden layer
//! into a smaller network and retrain the top layer only).
//!
//! Conventions used throughout:
//! - the network is `f(x) = (1/m) * sum_j u_j * h'(theta_j, x)`;
//! - the regularized objective carries `lambda1/2 * |u|^2` and
//!   `lambda2/2 * ||theta||^2` terms, so the drift of the regularizers is
//!   `-lambda1 * u` and `-lambda2 * theta`;
//! - particle drifts are the `m`-scaled negative gradient of the objective,
//!   so the step size is independent of the ensemble size;
//! - noisy gradient descent injects Gaussian noise with per-coordinate
//!   standard deviation `sqrt(2 * lambda3 * dt)`, whose continuum limit is a
//!   `lambda3`-diffusion term.
//!
//! With the `parallel` feature (default) the data-parallel inner loops run on
//! rayon; reductions are fixed-order so results are bit-identical to the
//! sequential fallback.

pub mod data;
pub mod dynamics;
pub mod efficiency;
pub mod exec;
pub mod meanfield;
pub mod model;
pub mod repopulate;
pub mod rng;
pub mod theory;

pub use data::{Dataset, SynthConfig};
pub use dynamics::{Trajectory, TrainerConfig};
pub use exec::ExecMode;
pub use meanfield::DensityGrid;
pub use model::{Activation, Ensemble, FeatureMap, Hyper, Normalization};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("grid layout mismatch: {0}")]
    GridMismatch(String),
    #[error("measure has zero total variation")]
    ZeroMeasure,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("idx parse error: {0}")]
    Idx(#[from] data::IdxError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
