//! Monte Carlo studies: plain optimization of a single mixture cost and
//! point set registration.

pub mod geometry;
pub mod metrics;
pub mod plain;
pub mod psr;
pub mod records;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::loss::LossKind;
use crate::solver::Termination;

pub use geometry::{Pose2, Pose3, RigidTransform};
pub use metrics::{aggregate_by_loss, compute_anees, compute_rmse, nees, AneesSummary, LossAggregate};
pub use plain::{
    generate_plain_corpus, plain_problem, run_plain_experiment, run_plain_on_corpus, MixtureSamplingSpec, PlainCorpus,
    PlainExperimentConfig, PlainResults,
};
pub use psr::{
    build_registration_problem, combined_covariance, generate_psr_instance, measure_point, registration_trial,
    run_psr_experiment, LandmarkConfiguration, MeasuredPoint, NoiseModel, OutlierComponent, PsrExperimentConfig,
    PsrInstance, PsrResults, SampleTransform,
};

/// Outcome of one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub loss: LossKind,
    pub dim: usize,
    pub initial_state: Vec<f64>,
    pub final_state: Vec<f64>,
    pub truth: Vec<f64>,
    /// Tangent-space error used for NEES.
    pub error_vector: Vec<f64>,
    /// Euclidean (translational) error.
    pub error_trans: f64,
    /// Rotational error in degrees, registration only.
    pub error_rot: Option<f64>,
    pub iterations: usize,
    pub time_us: u64,
    pub termination: Termination,
    pub covariance: Option<DMatrix<f64>>,
}

impl TrialRecord {
    #[cfg(test)]
    pub(crate) fn empty(loss: LossKind, dim: usize) -> Self {
        Self {
            trial_id: 0,
            loss,
            dim,
            initial_state: Vec::new(),
            final_state: Vec::new(),
            truth: Vec::new(),
            error_vector: Vec::new(),
            error_trans: 0.0,
            error_rot: None,
            iterations: 0,
            time_us: 0,
            termination: Termination::Gradient,
            covariance: None,
        }
    }

    /// Normalized estimation error squared; `None` without a usable covariance.
    pub fn nees(&self) -> Option<f64> {
        let cov = self.covariance.as_ref()?;
        nees(&DVector::from_column_slice(&self.error_vector), cov).ok()
    }
}

/// Independent random stream for item `index` of a `domain` under `seed`.
///
/// Streams do not depend on evaluation order, so parallel and serial runs agree.
pub fn trial_rng(seed: u64, domain: u16, index: u64) -> ChaCha8Rng {
    assert!(index < 1 << 48, "trial index {index} exceeds the stream space");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) | index);
    rng
}

/// `n` evenly spaced values covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}
