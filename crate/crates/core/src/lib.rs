//! Gaussian mixture losses for nonlinear least squares.
//!
//! Three ways of writing a mixture negative log-likelihood as a least-squares
//! residual ([`LossKind`]), a small dense Levenberg-Marquardt solver and the
//! Monte Carlo harnesses used to compare them.

pub mod error;
pub mod experiments;
pub mod gmm;
pub mod loss;
pub mod scan;
pub mod solver;

pub use error::{Error, Result};
pub use gmm::{GaussianComponent, GaussianMixture, SearchGrid};
pub use loss::{
    evaluate_dcs, evaluate_mixture_loss, evaluate_mm, evaluate_msm, evaluate_sm, DcsLoss, GaussianLoss, Loss,
    LossEvaluation, LossKind, MixtureLoss, MixtureLossConfig, Normalization,
};
pub use solver::{solve, LossBlock, Manifold, Problem, SolverConfig, SolverReport, SolverSummary, Termination};
