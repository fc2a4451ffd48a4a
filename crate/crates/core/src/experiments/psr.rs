//! Point set registration: align a noisy moving point set to a noisy fixed
//! set whose points form a Gaussian mixture.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::geometry::{Pose2, Pose3, RigidTransform};
use crate::experiments::{aggregate_by_loss, trial_rng, LossAggregate, TrialRecord};
use crate::gmm::{GaussianComponent, GaussianMixture};
use crate::loss::{evaluate_mixture_loss, LossKind, MixtureLossConfig};
use crate::solver::{solve, BlockEvaluation, CostBlock, Problem, SolverConfig, Termination};

const DOMAIN_LANDMARKS: u16 = 0x100;
const DOMAIN_TRANSFORMS: u16 = 0x200;
const DOMAIN_NOISE: u16 = 0x300;

/// Polar (2D) or spherical (3D) sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub range_std_dev: f64,
    pub angle_std_dev_deg: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { range_std_dev: 0.2, angle_std_dev_deg: 3.0 }
    }
}

/// Broad zero-mean component appended to every fixed-set mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierComponent {
    /// Weight relative to the total inlier weight of one; renormalized afterwards.
    pub weight: f64,
    pub std_dev: f64,
}

impl Default for OutlierComponent {
    fn default() -> Self {
        Self { weight: 0.1, std_dev: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsrExperimentConfig {
    pub dimension: usize,
    pub configurations: usize,
    pub runs: usize,
    /// Landmarks before clustering; 10 in 2D and 20 in 3D when unset.
    pub base_landmarks: Option<usize>,
    /// 2D landmarks are uniform in `±half_width` squared.
    pub square_half_width: f64,
    /// 3D landmarks lie in a spherical shell with these radii.
    pub shell_radius: [f64; 2],
    pub cluster_fraction: f64,
    pub cluster_copies: usize,
    pub cluster_std_dev: f64,
    pub max_translation: f64,
    /// Yaw range in 2D, per-axis Euler range in 3D; 15° and 5° when unset.
    pub max_angle_deg: Option<f64>,
    pub noise: NoiseModel,
    /// When false, measurements equal the true points but keep their covariances.
    pub add_noise: bool,
    pub outlier: Option<OutlierComponent>,
    pub seed: u64,
    pub loss: MixtureLossConfig,
    pub solver: SolverConfig,
}

impl Default for PsrExperimentConfig {
    fn default() -> Self {
        Self {
            dimension: 2,
            configurations: 20,
            runs: 100,
            base_landmarks: None,
            square_half_width: 5.0,
            shell_radius: [9.0, 11.0],
            cluster_fraction: 0.4,
            cluster_copies: 2,
            cluster_std_dev: 0.1,
            max_translation: 0.5,
            max_angle_deg: None,
            noise: NoiseModel::default(),
            add_noise: true,
            outlier: None,
            seed: 42,
            loss: MixtureLossConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl PsrExperimentConfig {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self { dimension, seed, ..Self::default() }
    }

    pub fn name(&self) -> String {
        format!("psr_{}d", self.dimension)
    }

    pub fn base_landmark_count(&self) -> usize {
        self.base_landmarks.unwrap_or(if self.dimension == 2 { 10 } else { 20 })
    }

    pub fn max_angle(&self) -> f64 {
        self.max_angle_deg.unwrap_or(if self.dimension == 2 { 15.0 } else { 5.0 }).to_radians()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dimension) {
            return Err(Error::InvalidParameter(format!("dimension must be 2 or 3, got {}", self.dimension)));
        }
        if self.configurations == 0 || self.runs == 0 || self.base_landmark_count() == 0 {
            return Err(Error::InvalidParameter("configuration, run and landmark counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) {
            return Err(Error::InvalidParameter("cluster_fraction must be in [0, 1]".into()));
        }
        let [r0, r1] = self.shell_radius;
        if !(r0 > 0.0 && r0 <= r1) || self.square_half_width.is_nan() || self.square_half_width <= 0.0 {
            return Err(Error::InvalidParameter("invalid landmark region".into()));
        }
        let non_negative = [self.cluster_std_dev, self.max_translation, self.max_angle()];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("spreads and transform ranges must be >= 0".into()));
        }
        if !(self.noise.range_std_dev > 0.0 && self.noise.angle_std_dev_deg > 0.0) {
            return Err(Error::InvalidParameter("noise standard deviations must be > 0".into()));
        }
        if let Some(o) = self.outlier {
            if !(o.weight > 0.0 && o.std_dev > 0.0) {
                return Err(Error::InvalidParameter("outlier weight and std_dev must be > 0".into()));
            }
        }
        self.loss.validate()?;
        self.solver.validate()
    }
}

/// True landmark positions of one configuration, clusters included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkConfiguration {
    pub landmarks: Vec<Vec<f64>>,
}

impl LandmarkConfiguration {
    /// Draws base landmarks, then duplicates the first `cluster_fraction` of
    /// them `cluster_copies` times with isotropic spread.
    pub fn sample<R: Rng + ?Sized>(config: &PsrExperimentConfig, rng: &mut R) -> Self {
        let n = config.base_landmark_count();
        let mut landmarks: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                if config.dimension == 2 {
                    let h = config.square_half_width;
                    DVector::from_fn(2, |_, _| rng.random_range(-h..=h))
                } else {
                    let r = rng.random_range(config.shell_radius[0]..=config.shell_radius[1]);
                    let az = rng.random_range(-PI..=PI);
                    let el = rng.random_range(-PI / 2.0..=PI / 2.0);
                    spherical_to_cartesian(r, az, el)
                }
            })
            .collect();
        let clustered = (config.cluster_fraction * n as f64).round() as usize;
        let spread = Normal::new(0.0, config.cluster_std_dev).expect("validated spread");
        for i in 0..clustered {
            for _ in 0..config.cluster_copies {
                let offset = DVector::from_fn(config.dimension, |_, _| spread.sample(rng));
                landmarks.push(&landmarks[i] + offset);
            }
        }
        Self { landmarks: landmarks.into_iter().map(|p| p.as_slice().to_vec()).collect() }
    }
}

/// A point measurement and its Cartesian covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredPoint {
    pub position: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

fn spherical_to_cartesian(r: f64, az: f64, el: f64) -> DVector<f64> {
    DVector::from_column_slice(&[r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()])
}

/// Measures `point` (sensor frame) through range/angle noise. The covariance
/// is the first-order propagation of the sensor noise at the measured point.
pub fn measure_point<R: Rng + ?Sized>(
    point: &DVector<f64>,
    noise: &NoiseModel,
    add_noise: bool,
    rng: &mut R,
) -> MeasuredPoint {
    let sr = noise.range_std_dev;
    let sa = noise.angle_std_dev_deg.to_radians();
    let mut draw = |sigma: f64| if add_noise { sigma * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { 0.0 };
    match point.len() {
        2 => {
            let r = point.norm() + draw(sr);
            let th = point[1].atan2(point[0]) + draw(sa);
            let (s, c) = th.sin_cos();
            let j = DMatrix::from_row_slice(2, 2, &[c, -r * s, s, r * c]);
            let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[sr * sr, sa * sa]));
            MeasuredPoint { position: DVector::from_column_slice(&[r * c, r * s]), covariance: &j * d * j.transpose() }
        }
        3 => {
            let norm = point.norm();
            let r = norm + draw(sr);
            let az = point[1].atan2(point[0]) + draw(sa);
            let el = (point[2] / norm).clamp(-1.0, 1.0).asin() + draw(sa);
            let (sa_, ca) = az.sin_cos();
            let (se, ce) = el.sin_cos();
            let j = DMatrix::from_row_slice(
                3,
                3,
                &[ce * ca, -r * ce * sa_, -r * se * ca, ce * sa_, r * ce * ca, -r * se * sa_, se, 0.0, r * ce],
            );
            let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[sr * sr, sa * sa, sa * sa]));
            MeasuredPoint { position: spherical_to_cartesian(r, az, el), covariance: &j * d * j.transpose() }
        }
        d => panic!("unsupported point dimension {d}"),
    }
}

/// One measurement pair and the transform mapping moving into fixed coordinates.
#[derive(Debug, Clone)]
pub struct PsrInstance<P> {
    pub fixed: Vec<MeasuredPoint>,
    pub moving: Vec<MeasuredPoint>,
    pub truth: P,
}

/// Draws a transform from the configured ranges.
pub trait SampleTransform: RigidTransform + Sized {
    fn sample<R: Rng + ?Sized>(config: &PsrExperimentConfig, rng: &mut R) -> Self;
}

impl SampleTransform for Pose2 {
    fn sample<R: Rng + ?Sized>(config: &PsrExperimentConfig, rng: &mut R) -> Self {
        let t = config.max_translation;
        let a = config.max_angle();
        Pose2::new(rng.random_range(-t..=t), rng.random_range(-t..=t), rng.random_range(-a..=a))
    }
}

impl SampleTransform for Pose3 {
    fn sample<R: Rng + ?Sized>(config: &PsrExperimentConfig, rng: &mut R) -> Self {
        let t = config.max_translation;
        let a = config.max_angle();
        let translation = Vector3::new(rng.random_range(-t..=t), rng.random_range(-t..=t), rng.random_range(-t..=t));
        let (roll, pitch, yaw) = (rng.random_range(-a..=a), rng.random_range(-a..=a), rng.random_range(-a..=a));
        Pose3::new(translation, Rotation3::from_euler_angles(roll, pitch, yaw))
    }
}

/// Measures every landmark from the fixed frame and from the moving frame.
pub fn generate_psr_instance<P: RigidTransform, R: Rng + ?Sized>(
    config: &PsrExperimentConfig,
    landmarks: &LandmarkConfiguration,
    truth: P,
    rng: &mut R,
) -> PsrInstance<P> {
    let points: Vec<DVector<f64>> = landmarks.landmarks.iter().map(|p| DVector::from_column_slice(p)).collect();
    let fixed = points.iter().map(|p| measure_point(p, &config.noise, config.add_noise, rng)).collect();
    let moving = points
        .iter()
        .map(|p| measure_point(&truth.inverse_transform_point(p), &config.noise, config.add_noise, rng))
        .collect();
    PsrInstance { fixed, moving, truth }
}

/// `Σ_j + R Σ_i Rᵀ`.
pub fn combined_covariance(fixed: &DMatrix<f64>, moving: &DMatrix<f64>, rotation: &DMatrix<f64>) -> DMatrix<f64> {
    fixed + rotation * moving * rotation.transpose()
}

/// Residual `R m_i + t` against the fixed-set mixture.
struct RegistrationBlock {
    indices: Vec<usize>,
    point: MeasuredPoint,
    fixed: Arc<Vec<MeasuredPoint>>,
    outlier: Option<OutlierComponent>,
    kind: LossKind,
    config: MixtureLossConfig,
}

impl fmt::Debug for RegistrationBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegistrationBlock").field("point", &self.point.position).field("kind", &self.kind).finish()
    }
}

impl RegistrationBlock {
    /// Fixed-set mixture with the moving covariance rotated into the fixed frame.
    fn mixture(&self, rotation: &DMatrix<f64>) -> Result<GaussianMixture> {
        let dim = self.point.position.len();
        let moving = rotation * &self.point.covariance * rotation.transpose();
        let weight = 1.0 / self.fixed.len() as f64;
        let mut components = self
            .fixed
            .iter()
            .map(|f| GaussianComponent::from_covariance(weight, f.position.clone(), &(&f.covariance + &moving)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(o) = self.outlier {
            components.push(GaussianComponent::from_std_devs(o.weight, DVector::zeros(dim), &vec![o.std_dev; dim])?);
        }
        GaussianMixture::new(components)
    }
}

impl<P: RigidTransform> CostBlock<P> for RegistrationBlock {
    fn tangent_indices(&self) -> &[usize] {
        &self.indices
    }

    fn evaluate(&self, state: &P) -> Result<BlockEvaluation> {
        let r = state.transform_point(&self.point.position);
        let mixture = self.mixture(&state.rotation_matrix())?;
        let ev = evaluate_mixture_loss(self.kind, &mixture, &self.config, &r)?;
        // The rotation dependence of the combined covariance is not differentiated.
        Ok(BlockEvaluation { jacobian: ev.jacobian * state.transform_jacobian(&self.point.position), value: ev.value })
    }
}

/// One block per moving point, each scored against the whole fixed set.
pub fn build_registration_problem<P: RigidTransform>(
    fixed: &[MeasuredPoint],
    moving: &[MeasuredPoint],
    kind: LossKind,
    outlier: Option<OutlierComponent>,
    config: &MixtureLossConfig,
) -> Result<Problem<P>> {
    if fixed.is_empty() || moving.is_empty() {
        return Err(Error::InvalidParameter("point sets must not be empty".into()));
    }
    if !kind.is_mixture() {
        return Err(Error::UnsupportedLoss(kind.to_string()));
    }
    for p in fixed.iter().chain(moving) {
        if p.position.len() != P::POINT_DIM || p.covariance.shape() != (P::POINT_DIM, P::POINT_DIM) {
            return Err(Error::DimensionMismatch { expected: P::POINT_DIM, actual: p.position.len() });
        }
    }
    config.validate()?;
    let tangent = P::identity().tangent_dim();
    let fixed = Arc::new(fixed.to_vec());
    let mut problem = Problem::new();
    for m in moving {
        problem.add_block(RegistrationBlock {
            indices: (0..tangent).collect(),
            point: m.clone(),
            fixed: fixed.clone(),
            outlier,
            kind,
            config: *config,
        });
    }
    Ok(problem)
}

#[derive(Debug, Clone)]
pub struct PsrResults {
    pub name: String,
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<LossAggregate>,
}

/// Solves every (configuration, run) pair with every selected loss from the identity.
///
/// Configuration `c` and the transform of run `k` come from their own random
/// streams; run `k` uses the same transform in every configuration.
pub fn run_psr_experiment(config: &PsrExperimentConfig, losses: &[LossKind]) -> Result<PsrResults> {
    config.validate()?;
    let losses: Vec<LossKind> = losses
        .iter()
        .copied()
        .filter(|k| {
            if !k.is_mixture() {
                warn!("{}: skipping {k}, registration needs a mixture loss", config.name());
            }
            k.is_mixture()
        })
        .collect();
    let records = match config.dimension {
        2 => run_trials::<Pose2>(config, &losses)?,
        _ => run_trials::<Pose3>(config, &losses)?,
    };
    let aggregates = aggregate_by_loss(&records, None, true);
    Ok(PsrResults { name: config.name(), records, aggregates })
}

fn run_trials<P: SampleTransform>(config: &PsrExperimentConfig, losses: &[LossKind]) -> Result<Vec<TrialRecord>> {
    let landmarks: Vec<LandmarkConfiguration> = (0..config.configurations)
        .map(|c| LandmarkConfiguration::sample(config, &mut trial_rng(config.seed, DOMAIN_LANDMARKS, c as u64)))
        .collect();
    let transforms: Vec<P> =
        (0..config.runs).map(|k| P::sample(config, &mut trial_rng(config.seed, DOMAIN_TRANSFORMS, k as u64))).collect();
    let per_trial = (0..config.configurations * config.runs)
        .into_par_iter()
        .map(|id| {
            let (c, k) = (id / config.runs, id % config.runs);
            let mut rng = trial_rng(config.seed, DOMAIN_NOISE, id as u64);
            let instance = generate_psr_instance(config, &landmarks[c], transforms[k].clone(), &mut rng);
            losses
                .iter()
                .map(|&kind| registration_trial(config, &instance, kind, id as u64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

/// Solves one instance from the identity and scores the result.
pub fn registration_trial<P: RigidTransform>(
    config: &PsrExperimentConfig,
    instance: &PsrInstance<P>,
    kind: LossKind,
    trial_id: u64,
) -> Result<TrialRecord> {
    let problem =
        build_registration_problem::<P>(&instance.fixed, &instance.moving, kind, config.outlier, &config.loss)?;
    let initial = P::identity();
    let (state, iterations, termination, time_us) = match solve(&problem, initial.clone(), &config.solver) {
        Ok(r) => (r.state, r.summary.iterations, r.summary.termination, r.summary.wall_time_us),
        Err(e) => {
            warn!("trial {trial_id} ({kind}) failed: {e}");
            (initial.clone(), 0, Termination::MaxIterations, 0)
        }
    };
    let covariance = match problem.recover_covariance(&state) {
        Ok(c) => Some(c),
        Err(Error::RankDeficient { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(TrialRecord {
        trial_id,
        loss: kind,
        dim: P::POINT_DIM,
        initial_state: initial.to_vec(),
        final_state: state.to_vec(),
        truth: instance.truth.to_vec(),
        error_vector: state.error_vector(&instance.truth).as_slice().to_vec(),
        error_trans: state.translation_error(&instance.truth),
        error_rot: Some(state.rotation_error_deg(&instance.truth)),
        iterations,
        time_us,
        termination,
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clustering_counts() {
        let mut rng = trial_rng(1, 0, 0);
        let c2 = LandmarkConfiguration::sample(&PsrExperimentConfig::new(2, 1), &mut rng);
        assert_eq!(c2.landmarks.len(), 18);
        assert!(c2.landmarks[..10].iter().all(|p| p.iter().all(|v| v.abs() <= 5.0)));
        let c3 = LandmarkConfiguration::sample(&PsrExperimentConfig::new(3, 1), &mut rng);
        assert_eq!(c3.landmarks.len(), 36);
        for p in &c3.landmarks[..20] {
            let r = DVector::from_column_slice(p).norm();
            assert!((9.0..=11.0 + 1e-12).contains(&r));
        }
    }

    #[test]
    fn noise_free_identity_instance_matches() {
        let config = PsrExperimentConfig { add_noise: false, ..PsrExperimentConfig::new(2, 3) };
        let mut rng = trial_rng(3, 0, 0);
        let lm = LandmarkConfiguration::sample(&config, &mut rng);
        let inst = generate_psr_instance(&config, &lm, Pose2::identity(), &mut rng);
        for (f, m) in inst.fixed.iter().zip(&inst.moving) {
            assert!((&f.position - &m.position).norm() < 1e-12);
        }
    }

    #[test]
    fn combined_covariance_adds() {
        let f = DMatrix::from_diagonal_element(2, 2, 0.01);
        let m = DMatrix::from_diagonal_element(2, 2, 0.04);
        let c = combined_covariance(&f, &m, &DMatrix::identity(2, 2));
        assert!((c - DMatrix::from_diagonal_element(2, 2, 0.05)).abs().max() < 1e-15);
    }

    #[test]
    fn polar_covariance_at_bearing_zero() {
        let p = measure_point(
            &DVector::from_column_slice(&[10.0, 0.0]),
            &NoiseModel::default(),
            false,
            &mut trial_rng(0, 0, 0),
        );
        let along = 0.2f64.powi(2);
        let across = (10.0 * 3f64.to_radians()).powi(2);
        assert!((p.covariance[(0, 0)] - along).abs() < 1e-15);
        assert!((p.covariance[(1, 1)] - across).abs() < 1e-12);
        assert!(p.covariance[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p2 = MeasuredPoint { position: DVector::zeros(2), covariance: DMatrix::identity(2, 2) };
        let p3 = MeasuredPoint { position: DVector::zeros(3), covariance: DMatrix::identity(3, 3) };
        let cfg = MixtureLossConfig::default();
        assert!(build_registration_problem::<Pose2>(
            &[],
            std::slice::from_ref(&p2),
            LossKind::MaxSumMixture,
            None,
            &cfg
        )
        .is_err());
        assert!(matches!(
            build_registration_problem::<Pose2>(&[p3], std::slice::from_ref(&p2), LossKind::MaxSumMixture, None, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            build_registration_problem::<Pose2>(
                std::slice::from_ref(&p2),
                std::slice::from_ref(&p2),
                LossKind::Dcs,
                None,
                &cfg
            ),
            Err(Error::UnsupportedLoss(_))
        ));
    }
}
