use approx::assert_relative_eq;
use mixlsq::experiments::records::{write_trials_csv, OutputMeta};
use mixlsq::experiments::{
    build_registration_problem, combined_covariance, generate_psr_instance, measure_point, registration_trial,
    run_psr_experiment, trial_rng, LandmarkConfiguration, MeasuredPoint, NoiseModel, Pose2, Pose3, PsrExperimentConfig,
    RigidTransform, SampleTransform,
};
use mixlsq::loss::{normalization_mm, normalization_msm, normalization_sm};
use mixlsq::{solve, Error, GaussianComponent, GaussianMixture, LossKind, Manifold, MixtureLossConfig, SolverConfig};
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};

const MIXTURE_LOSSES: [LossKind; 3] = [LossKind::MaxMixture, LossKind::SumMixture, LossKind::MaxSumMixture];

/// Noise so small that every moving point sees only its own fixed point.
fn sharp(dimension: usize, seed: u64) -> PsrExperimentConfig {
    PsrExperimentConfig {
        add_noise: false,
        noise: NoiseModel { range_std_dev: 1e-3, angle_std_dev_deg: 1e-3 },
        ..PsrExperimentConfig::new(dimension, seed)
    }
}

fn sample_instance<P: SampleTransform>(config: &PsrExperimentConfig, truth: P) -> mixlsq::experiments::PsrInstance<P> {
    let landmarks = LandmarkConfiguration::sample(config, &mut trial_rng(config.seed, 1, 0));
    generate_psr_instance(config, &landmarks, truth, &mut trial_rng(config.seed, 2, 0))
}

/// `Σ_i ln γ_i - ln s_ii`: the cost when every residual sits on its own component.
fn on_component_cost<P: RigidTransform>(
    fixed: &[MeasuredPoint],
    moving: &[MeasuredPoint],
    truth: &P,
    kind: LossKind,
) -> f64 {
    let rot = truth.rotation_matrix();
    let cfg = MixtureLossConfig::default();
    let w = 1.0 / fixed.len() as f64;
    moving
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let components: Vec<_> = fixed
                .iter()
                .map(|f| {
                    GaussianComponent::from_covariance(
                        w,
                        f.position.clone(),
                        &combined_covariance(&f.covariance, &m.covariance, &rot),
                    )
                    .unwrap()
                })
                .collect();
            let own = components[i].scaling();
            let mixture = GaussianMixture::new(components).unwrap();
            let gamma = match kind {
                LossKind::MaxMixture => normalization_mm(&mixture, &cfg),
                LossKind::SumMixture => normalization_sm(&mixture, &cfg),
                _ => normalization_msm(&mixture, &cfg),
            };
            gamma.ln() - own.ln()
        })
        .sum()
}

fn check_truth_is_fixed_point<P: SampleTransform + PartialEq>(config: &PsrExperimentConfig, truth: P) {
    let instance = sample_instance(config, truth);
    for kind in MIXTURE_LOSSES {
        let problem =
            build_registration_problem::<P>(&instance.fixed, &instance.moving, kind, None, &config.loss).unwrap();
        let report = solve(&problem, instance.truth.clone(), &SolverConfig::default()).unwrap();
        let err = report.state.error_vector(&instance.truth);
        assert!(err.amax() < 1e-6, "{kind}: {err}");
        let expected = on_component_cost(&instance.fixed, &instance.moving, &instance.truth, kind);
        assert!(
            (report.summary.final_cost - expected).abs() < 1e-8,
            "{kind}: {} vs {expected}",
            report.summary.final_cost
        );
        assert!((report.summary.initial_cost - expected).abs() < 1e-8);
    }
}

#[test]
fn noiseless_truth_is_a_fixed_point_2d() {
    let config = sharp(2, 4);
    check_truth_is_fixed_point(&config, Pose2::sample(&config, &mut trial_rng(4, 3, 0)));
}

#[test]
fn noiseless_truth_is_a_fixed_point_3d() {
    let config = sharp(3, 4);
    check_truth_is_fixed_point(&config, Pose3::sample(&config, &mut trial_rng(4, 3, 0)));
}

#[test]
fn noiseless_identity_is_recovered_from_identity() {
    let config = sharp(2, 9);
    let instance = sample_instance(&config, Pose2::identity());
    for (f, m) in instance.fixed.iter().zip(&instance.moving) {
        assert_eq!(f.position, m.position);
        assert_eq!(f.covariance, m.covariance);
    }
    for kind in MIXTURE_LOSSES {
        let record = registration_trial(&config, &instance, kind, 0).unwrap();
        assert!(record.error_trans < 1e-6 && record.error_rot.unwrap() < 1e-6, "{kind}");
    }
}

#[test]
fn clustered_counts_follow_dimension() {
    for (dim, n) in [(2, 18), (3, 36)] {
        let config = PsrExperimentConfig::new(dim, 1);
        let landmarks = LandmarkConfiguration::sample(&config, &mut trial_rng(1, 1, 0));
        assert_eq!(landmarks.landmarks.len(), n);
    }
}

#[test]
fn combined_covariance_adds() {
    let fixed = DMatrix::from_diagonal_element(2, 2, 0.01);
    let moving = DMatrix::from_diagonal_element(2, 2, 0.04);
    assert_eq!(
        combined_covariance(&fixed, &moving, &DMatrix::identity(2, 2)),
        DMatrix::from_diagonal_element(2, 2, 0.05)
    );
    let rot = Pose2::new(0.0, 0.0, 0.7).rotation_matrix();
    let aniso = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.04, 0.25]));
    let c = combined_covariance(&fixed, &aniso, &rot);
    assert_relative_eq!(c.trace(), 0.02 + 0.29, epsilon = 1e-14);
    assert_relative_eq!(c[(0, 1)], c[(1, 0)], epsilon = 1e-15);
}

/// Sample covariance of 1e5 noisy measurements against the propagated covariance.
fn monte_carlo_covariance(point: DVector<f64>, expected_diag: &[f64]) {
    let noise = NoiseModel::default();
    let mut rng = trial_rng(17, 5, 0);
    let n = 100_000;
    let dim = point.len();
    let samples: Vec<DVector<f64>> = (0..n).map(|_| measure_point(&point, &noise, true, &mut rng).position).collect();
    let mean = samples.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / n as f64;
    let cov = samples.iter().fold(DMatrix::zeros(dim, dim), |acc, s| acc + (s - &mean) * (s - &mean).transpose())
        / (n - 1) as f64;
    let propagated = measure_point(&point, &noise, false, &mut rng).covariance;
    for i in 0..dim {
        assert_relative_eq!(propagated[(i, i)], expected_diag[i], max_relative = 1e-12);
        assert!(
            (cov[(i, i)] / expected_diag[i] - 1.0).abs() < 0.03,
            "axis {i}: {} vs {}",
            cov[(i, i)],
            expected_diag[i]
        );
        for j in 0..i {
            assert!(cov[(i, j)].abs() < 0.01 && propagated[(i, j)].abs() < 1e-12);
        }
    }
}

#[test]
fn polar_noise_covariance_matches_sampling() {
    let lateral = (10.0 * 3f64.to_radians()).powi(2);
    monte_carlo_covariance(DVector::from_column_slice(&[10.0, 0.0]), &[0.04, lateral]);
}

#[test]
fn spherical_noise_covariance_matches_sampling() {
    let lateral = (10.0 * 3f64.to_radians()).powi(2);
    monte_carlo_covariance(DVector::from_column_slice(&[10.0, 0.0, 0.0]), &[0.04, lateral, lateral]);
}

#[test]
fn single_point_registration_is_rank_deficient() {
    let point = |x: f64, y: f64| MeasuredPoint {
        position: DVector::from_column_slice(&[x, y]),
        covariance: DMatrix::from_diagonal_element(2, 2, 0.01),
    };
    // A moving point at the origin leaves the rotation without any influence.
    let fixed = [point(0.4, -0.3)];
    let moving = [point(0.0, 0.0)];
    let problem = build_registration_problem::<Pose2>(
        &fixed,
        &moving,
        LossKind::MaxSumMixture,
        None,
        &MixtureLossConfig::default(),
    )
    .unwrap();
    let report = solve(&problem, Pose2::identity(), &SolverConfig::default()).unwrap();
    assert!((report.state.translation - nalgebra::Vector2::new(0.4, -0.3)).norm() < 1e-6);
    assert!(matches!(problem.recover_covariance(&report.state), Err(Error::RankDeficient { rank: 2, dim: 3 })));

    let moving = [point(2.0, 1.0)];
    let problem = build_registration_problem::<Pose2>(
        &fixed,
        &moving,
        LossKind::MaxSumMixture,
        None,
        &MixtureLossConfig::default(),
    )
    .unwrap();
    let report = solve(&problem, Pose2::identity(), &SolverConfig::default()).unwrap();
    let landed = report.state.transform(&nalgebra::Vector2::new(2.0, 1.0));
    assert!((landed - nalgebra::Vector2::new(0.4, -0.3)).norm() < 1e-6);
    assert!(matches!(problem.recover_covariance(&report.state), Err(Error::RankDeficient { .. })));
}

#[test]
fn registration_rejects_bad_inputs() {
    let p2 = MeasuredPoint { position: DVector::zeros(2), covariance: DMatrix::identity(2, 2) };
    let cfg = MixtureLossConfig::default();
    assert!(build_registration_problem::<Pose2>(&[], std::slice::from_ref(&p2), LossKind::MaxSumMixture, None, &cfg)
        .is_err());
    assert!(build_registration_problem::<Pose3>(
        std::slice::from_ref(&p2),
        std::slice::from_ref(&p2),
        LossKind::MaxSumMixture,
        None,
        &cfg
    )
    .is_err());
    assert!(build_registration_problem::<Pose2>(
        std::slice::from_ref(&p2),
        std::slice::from_ref(&p2),
        LossKind::Dcs,
        None,
        &cfg
    )
    .is_err());
}

fn small(dimension: usize, seed: u64) -> PsrExperimentConfig {
    PsrExperimentConfig { configurations: 3, runs: 4, ..PsrExperimentConfig::new(dimension, seed) }
}

fn csv_bytes(records: &[mixlsq::experiments::TrialRecord]) -> Vec<u8> {
    let meta = OutputMeta { seed: 0, version: "test".into(), config_hash: "x".into(), generated_at: None };
    let mut out = Vec::new();
    write_trials_csv(&mut out, &meta, records, false).unwrap();
    out
}

#[test]
fn experiment_is_deterministic_and_shares_transforms() {
    let config = small(2, 12);
    let a = run_psr_experiment(&config, &LossKind::ALL).unwrap();
    let b = run_psr_experiment(&config, &LossKind::ALL).unwrap();
    assert_eq!(csv_bytes(&a.records), csv_bytes(&b.records));
    // Dcs is skipped for registration.
    assert_eq!(a.records.len(), 3 * 4 * 3);
    assert_eq!(a.aggregates.len(), 3);
    let truth_of = |id: u64| a.records.iter().find(|r| r.trial_id == id).unwrap().truth.clone();
    assert_eq!(truth_of(1), truth_of(5));
    assert_ne!(truth_of(1), truth_of(2));
    for r in &a.records {
        assert_eq!(r.error_vector.len(), 3);
        assert!(r.error_trans >= 0.0 && r.error_rot.unwrap() >= 0.0);
        if let Some(c) = &r.covariance {
            assert!((c - c.transpose()).amax() < 1e-12 * c.amax());
            assert!(c.clone().symmetric_eigenvalues().min() > 0.0);
        }
    }
}

#[test]
fn three_dimensional_runs_report_geodesic_errors() {
    let config = PsrExperimentConfig { configurations: 1, runs: 3, ..PsrExperimentConfig::new(3, 2) };
    let res = run_psr_experiment(&config, &[LossKind::MaxSumMixture]).unwrap();
    for r in &res.records {
        assert_eq!(r.error_vector.len(), 6);
        let rot = Vector3::new(r.error_vector[3], r.error_vector[4], r.error_vector[5]);
        assert_relative_eq!(rot.norm().to_degrees(), r.error_rot.unwrap(), epsilon = 1e-9);
        assert!(r.error_trans < 0.5);
    }
    let pose = Pose3::new(Vector3::zeros(), Rotation3::from_euler_angles(0.0, 0.0, 0.1));
    assert_relative_eq!(pose.norm(), 0.1, epsilon = 1e-14);
}
