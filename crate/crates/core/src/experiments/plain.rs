//! Plain optimization: one linear residual wrapped into a mixture loss,
//! solved from a grid of starting points.

use std::sync::Arc;

use log::{info, warn};
use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{aggregate_by_loss, linspace, trial_rng, LossAggregate, TrialRecord};
use crate::gmm::{GaussianComponent, GaussianMixture, SearchGrid};
use crate::loss::{DcsLoss, Loss, LossKind, MixtureLoss, MixtureLossConfig};
use crate::solver::{solve, LossBlock, Problem, SolverConfig, Termination};

/// Uniform ranges the two-component mixtures are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSamplingSpec {
    pub first_std_dev: [f64; 2],
    /// Half-width of the second mean's range (asymmetric mixtures only).
    pub second_mean_half_width: f64,
    pub std_dev_multiplier: [f64; 2],
    pub first_weight: [f64; 2],
}

impl Default for MixtureSamplingSpec {
    fn default() -> Self {
        Self {
            first_std_dev: [0.1, 1.0],
            second_mean_half_width: 2.0,
            std_dev_multiplier: [2.0, 10.0],
            first_weight: [0.2, 0.8],
        }
    }
}

impl MixtureSamplingSpec {
    /// Draws one mixture. In 2D every per-axis quantity is drawn independently
    /// and the components are axis aligned; the weight is shared.
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, symmetric: bool, rng: &mut R) -> Result<GaussianMixture> {
        let w1 = rng.random_range(self.first_weight[0]..=self.first_weight[1]);
        let mut std1 = Vec::with_capacity(dim);
        let mut std2 = Vec::with_capacity(dim);
        let mut mean2 = DVector::zeros(dim);
        for axis in 0..dim {
            let s = rng.random_range(self.first_std_dev[0]..=self.first_std_dev[1]);
            std1.push(s);
            std2.push(s * rng.random_range(self.std_dev_multiplier[0]..=self.std_dev_multiplier[1]));
            if !symmetric {
                let h = self.second_mean_half_width;
                mean2[axis] = rng.random_range(-h..=h);
            }
        }
        GaussianMixture::new(vec![
            GaussianComponent::from_std_devs(w1, DVector::zeros(dim), &std1)?,
            GaussianComponent::from_std_devs(1.0 - w1, mean2, &std2)?,
        ])
    }

    fn validate(&self) -> Result<()> {
        let ranges = [self.first_std_dev, self.std_dev_multiplier, self.first_weight];
        if ranges.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi))
            || self.first_weight[1] >= 1.0
            || self.second_mean_half_width.is_nan()
            || self.second_mean_half_width < 0.0
        {
            return Err(Error::InvalidParameter("invalid mixture sampling ranges".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlainExperimentConfig {
    pub dimension: usize,
    pub symmetric: bool,
    pub mixtures: usize,
    /// Starting points per mixture; a perfect square in 2D.
    pub starts: usize,
    pub start_half_width: f64,
    pub success_threshold: f64,
    pub seed: u64,
    pub sampling: MixtureSamplingSpec,
    /// Grid used to reject multimodal mixtures and locate the true mode.
    pub search_half_width: f64,
    pub search_resolution: f64,
    pub loss: MixtureLossConfig,
    pub dcs_phi: f64,
    pub solver: SolverConfig,
}

impl Default for PlainExperimentConfig {
    fn default() -> Self {
        Self {
            dimension: 1,
            symmetric: true,
            mixtures: 100,
            starts: 100,
            start_half_width: 4.0,
            success_threshold: 0.01,
            seed: 42,
            sampling: MixtureSamplingSpec::default(),
            search_half_width: 4.0,
            search_resolution: 0.01,
            loss: MixtureLossConfig::default(),
            dcs_phi: 1.0,
            solver: SolverConfig::default(),
        }
    }
}

/// Candidates are rejected until this many draws have been seen before the
/// acceptance-rate guard applies.
const MIN_DRAWS_FOR_GUARD: usize = 100;
const MIN_ACCEPTANCE_RATE: f64 = 0.01;

impl PlainExperimentConfig {
    pub fn new(dimension: usize, symmetric: bool, seed: u64) -> Self {
        Self { dimension, symmetric, seed, ..Self::default() }
    }

    /// `plain_1d_sym`, `plain_2d_asym`, ...
    pub fn name(&self) -> String {
        format!("plain_{}d_{}", self.dimension, if self.symmetric { "sym" } else { "asym" })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dimension) {
            return Err(Error::InvalidParameter(format!("dimension must be 1 or 2, got {}", self.dimension)));
        }
        if self.mixtures == 0 || self.starts == 0 {
            return Err(Error::InvalidParameter("mixture and start counts must be >= 1".into()));
        }
        if self.dimension == 2 && starts_per_axis(self.starts).is_none() {
            return Err(Error::InvalidParameter(format!("2D start count {} is not a perfect square", self.starts)));
        }
        let positive = [
            self.start_half_width,
            self.success_threshold,
            self.search_half_width,
            self.search_resolution,
            self.dcs_phi,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("widths, threshold, resolution and phi must be > 0".into()));
        }
        self.sampling.validate()?;
        self.loss.validate()?;
        self.solver.validate()
    }

    pub fn search_grid(&self) -> SearchGrid {
        SearchGrid::symmetric(self.dimension, self.search_half_width, self.search_resolution)
    }

    /// 1D: evenly spaced. 2D: square grid, first axis slowest.
    pub fn start_points(&self) -> Vec<DVector<f64>> {
        let h = self.start_half_width;
        if self.dimension == 1 {
            return linspace(-h, h, self.starts).into_iter().map(|x| DVector::from_element(1, x)).collect();
        }
        let axis = linspace(-h, h, starts_per_axis(self.starts).unwrap_or(1));
        axis.iter().flat_map(|&x| axis.iter().map(move |&y| DVector::from_column_slice(&[x, y]))).collect()
    }

    fn domain(&self) -> u16 {
        (self.dimension as u16) * 2 + u16::from(!self.symmetric)
    }
}

fn starts_per_axis(n: usize) -> Option<usize> {
    let k = (n as f64).sqrt().round() as usize;
    (k * k == n).then_some(k)
}

/// Accepted mixtures and their true modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainCorpus {
    pub dimension: usize,
    pub symmetric: bool,
    pub seed: u64,
    /// Candidates examined, accepted or not.
    pub draws: usize,
    pub mixtures: Vec<GaussianMixture>,
    pub modes: Vec<Vec<f64>>,
}

impl PlainCorpus {
    pub fn acceptance_rate(&self) -> f64 {
        self.mixtures.len() as f64 / self.draws.max(1) as f64
    }

    /// Rebuilds a corpus from bare mixtures, recomputing the modes.
    pub fn from_mixtures(config: &PlainExperimentConfig, mixtures: Vec<GaussianMixture>) -> Result<Self> {
        let grid = config.search_grid();
        let modes = mixtures
            .par_iter()
            .map(|m| m.find_global_mode(&grid).map(|x| x.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dimension: config.dimension,
            symmetric: config.symmetric,
            seed: config.seed,
            draws: mixtures.len(),
            mixtures,
            modes,
        })
    }
}

/// Samples mixtures until `config.mixtures` unimodal ones are found.
///
/// Candidate `i` always comes from its own random stream and candidates are
/// accepted in index order, so the corpus does not depend on thread count.
pub fn generate_plain_corpus(config: &PlainExperimentConfig) -> Result<PlainCorpus> {
    config.validate()?;
    let grid = config.search_grid();
    let mut mixtures = Vec::with_capacity(config.mixtures);
    let mut modes = Vec::with_capacity(config.mixtures);
    let mut draws = 0usize;
    while mixtures.len() < config.mixtures {
        let batch = (2 * (config.mixtures - mixtures.len())).max(16);
        let candidates = (draws..draws + batch)
            .into_par_iter()
            .map(|i| {
                let mut rng = trial_rng(config.seed, config.domain(), i as u64);
                let mixture = config.sampling.sample(config.dimension, config.symmetric, &mut rng)?;
                // A unique interior minimum is the global mode.
                let minima = mixture.local_minima(&grid)?;
                Ok((minima.len() == 1).then(|| (mixture, minima[0].as_slice().to_vec())))
            })
            .collect::<Result<Vec<_>>>()?;
        for candidate in candidates {
            draws += 1;
            if let Some((m, mode)) = candidate {
                mixtures.push(m);
                modes.push(mode);
                if mixtures.len() == config.mixtures {
                    break;
                }
            }
        }
        if draws >= MIN_DRAWS_FOR_GUARD && (mixtures.len() as f64) < MIN_ACCEPTANCE_RATE * draws as f64 {
            return Err(Error::Experiment(format!(
                "rejection rate above 99% ({} of {draws} candidates accepted); check the sampling ranges",
                mixtures.len()
            )));
        }
    }
    info!("{}: accepted {} of {draws} candidate mixtures", config.name(), mixtures.len());
    Ok(PlainCorpus {
        dimension: config.dimension,
        symmetric: config.symmetric,
        seed: config.seed,
        draws,
        mixtures,
        modes,
    })
}

#[derive(Debug, Clone)]
pub struct PlainResults {
    pub name: String,
    pub corpus: PlainCorpus,
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<LossAggregate>,
}

pub fn run_plain_experiment(config: &PlainExperimentConfig, losses: &[LossKind]) -> Result<PlainResults> {
    let corpus = generate_plain_corpus(config)?;
    run_plain_on_corpus(config, corpus, losses)
}

/// Builds the one-block problem `½‖ρ(x)‖²` for a mixture.
pub fn plain_problem(
    config: &PlainExperimentConfig,
    mixture: &Arc<GaussianMixture>,
    kind: LossKind,
) -> Result<Problem<DVector<f64>>> {
    let loss: Arc<dyn Loss> = match kind {
        LossKind::Dcs => {
            // Whitened by the component with the largest scaling.
            let scalings = mixture.scalings();
            let best = (0..scalings.len()).fold(0, |b, l| if scalings[l] > scalings[b] { l } else { b });
            let c = &mixture.components()[best];
            Arc::new(DcsLoss::new(config.dcs_phi, c.mean().clone(), c.sqrt_info().clone())?)
        }
        _ => Arc::new(MixtureLoss::new(kind, mixture.clone(), config.loss)?),
    };
    let mut problem = Problem::new();
    problem.add_block(LossBlock::identity(mixture.dimension(), loss));
    Ok(problem)
}

pub fn run_plain_on_corpus(
    config: &PlainExperimentConfig,
    corpus: PlainCorpus,
    losses: &[LossKind],
) -> Result<PlainResults> {
    config.validate()?;
    if corpus.mixtures.iter().any(|m| m.dimension() != config.dimension) {
        return Err(Error::Experiment("corpus dimension does not match the configuration".into()));
    }
    let losses: Vec<LossKind> = losses
        .iter()
        .copied()
        .filter(|k| {
            let ok = k.is_mixture() || config.symmetric;
            if !ok {
                warn!("{}: skipping {k}, it only applies to symmetric mixtures", config.name());
            }
            ok
        })
        .collect();
    let starts = config.start_points();
    let per_mixture = corpus
        .mixtures
        .par_iter()
        .zip(corpus.modes.par_iter())
        .enumerate()
        .map(|(mi, (mixture, mode))| {
            let mixture = Arc::new(mixture.clone());
            let truth = DVector::from_column_slice(mode);
            let mut out = Vec::with_capacity(losses.len() * starts.len());
            for &kind in &losses {
                let problem = plain_problem(config, &mixture, kind)?;
                for (si, start) in starts.iter().enumerate() {
                    let trial_id = (mi * starts.len() + si) as u64;
                    out.push(plain_trial(&problem, &config.solver, kind, trial_id, start, &truth));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<TrialRecord> = per_mixture.into_iter().flatten().collect();
    let aggregates = aggregate_by_loss(&records, Some(config.success_threshold), false);
    Ok(PlainResults { name: config.name(), corpus, records, aggregates })
}

fn plain_trial(
    problem: &Problem<DVector<f64>>,
    solver: &SolverConfig,
    kind: LossKind,
    trial_id: u64,
    start: &DVector<f64>,
    truth: &DVector<f64>,
) -> TrialRecord {
    let (state, iterations, termination, time_us) = match solve(problem, start.clone(), solver) {
        Ok(r) => (r.state, r.summary.iterations, r.summary.termination, r.summary.wall_time_us),
        Err(e) => {
            warn!("trial {trial_id} ({kind}) failed: {e}");
            (start.clone(), 0, Termination::MaxIterations, 0)
        }
    };
    let error = &state - truth;
    TrialRecord {
        trial_id,
        loss: kind,
        dim: start.len(),
        initial_state: start.as_slice().to_vec(),
        final_state: state.as_slice().to_vec(),
        truth: truth.as_slice().to_vec(),
        error_trans: error.norm(),
        error_vector: error.as_slice().to_vec(),
        error_rot: None,
        iterations,
        time_us,
        termination,
        covariance: None,
    }
}
