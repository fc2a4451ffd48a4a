//! Dense Levenberg-Marquardt over residual blocks with attached losses.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use log::trace;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Loss;

/// A state that is updated through a local chart.
pub trait Manifold: Clone + Send + Sync {
    fn tangent_dim(&self) -> usize;

    /// `x ⊞ δ`.
    fn retract(&self, delta: &DVector<f64>) -> Self;

    /// Magnitude used by the parameter-change test.
    fn norm(&self) -> f64;
}

impl Manifold for DVector<f64> {
    fn tangent_dim(&self) -> usize {
        self.len()
    }

    fn retract(&self, delta: &DVector<f64>) -> Self {
        self + delta
    }

    fn norm(&self) -> f64 {
        DVector::norm(self)
    }
}

/// Robustified value `ρ(r(x))` of one block and its Jacobian w.r.t. the touched tangent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEvaluation {
    pub value: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

pub trait CostBlock<S>: Send + Sync {
    /// Tangent coordinates the block depends on; Jacobian columns follow this order.
    fn tangent_indices(&self) -> &[usize];

    fn evaluate(&self, state: &S) -> Result<BlockEvaluation>;
}

type ResidualFn<S> = dyn Fn(&S) -> Result<(DVector<f64>, DMatrix<f64>)> + Send + Sync;

/// A residual function `r(x)`, `∂r/∂x` wrapped by a fixed loss.
pub struct LossBlock<S> {
    indices: Vec<usize>,
    residual: Box<ResidualFn<S>>,
    loss: Arc<dyn Loss>,
}

impl<S> LossBlock<S> {
    pub fn new<F>(indices: Vec<usize>, loss: Arc<dyn Loss>, residual: F) -> Self
    where
        F: Fn(&S) -> Result<(DVector<f64>, DMatrix<f64>)> + Send + Sync + 'static,
    {
        Self { indices, residual: Box::new(residual), loss }
    }

    pub fn loss(&self) -> &dyn Loss {
        self.loss.as_ref()
    }
}

impl LossBlock<DVector<f64>> {
    /// `r(x) = x - offset` on the whole vector state.
    pub fn identity(dim: usize, loss: Arc<dyn Loss>) -> Self {
        Self::new((0..dim).collect(), loss, move |x: &DVector<f64>| Ok((x.clone(), DMatrix::identity(dim, dim))))
    }
}

impl<S> fmt::Debug for LossBlock<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LossBlock").field("indices", &self.indices).field("loss", &self.loss).finish()
    }
}

impl<S: Send + Sync> CostBlock<S> for LossBlock<S> {
    fn tangent_indices(&self) -> &[usize] {
        &self.indices
    }

    fn evaluate(&self, state: &S) -> Result<BlockEvaluation> {
        let (r, dr) = (self.residual)(state)?;
        if dr.nrows() != r.len() || dr.ncols() != self.indices.len() {
            return Err(Error::DimensionMismatch { expected: self.indices.len(), actual: dr.ncols() });
        }
        let ev = self.loss.evaluate(&r)?;
        Ok(BlockEvaluation { jacobian: ev.jacobian * dr, value: ev.value })
    }
}

pub struct Problem<S> {
    blocks: Vec<Box<dyn CostBlock<S>>>,
}

impl<S> Default for Problem<S> {
    fn default() -> Self {
        Self { blocks: Vec::new() }
    }
}

impl<S: Manifold> Problem<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, block: impl CostBlock<S> + 'static) {
        self.blocks.push(Box::new(block));
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Stacked `ρ` and chain-ruled Jacobian over the full tangent space.
    pub fn linearize(&self, state: &S) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let dim = state.tangent_dim();
        let evals = self.blocks.iter().map(|b| b.evaluate(state)).collect::<Result<Vec<_>>>()?;
        let rows = evals.iter().map(|e| e.value.len()).sum();
        let mut value = DVector::zeros(rows);
        let mut jacobian = DMatrix::zeros(rows, dim);
        let mut row = 0;
        for (i, (block, ev)) in self.blocks.iter().zip(&evals).enumerate() {
            let n = ev.value.len();
            if ev.value.iter().chain(ev.jacobian.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCost { block: i });
            }
            let indices = block.tangent_indices();
            if ev.jacobian.nrows() != n || ev.jacobian.ncols() != indices.len() {
                return Err(Error::DimensionMismatch { expected: indices.len(), actual: ev.jacobian.ncols() });
            }
            value.rows_mut(row, n).copy_from(&ev.value);
            for (c, &col) in indices.iter().enumerate() {
                if col >= dim {
                    return Err(Error::DimensionMismatch { expected: dim, actual: col + 1 });
                }
                jacobian.view_mut((row, col), (n, 1)).copy_from(&ev.jacobian.column(c));
            }
            row += n;
        }
        Ok((value, jacobian))
    }

    /// `½ Σ ‖ρ‖²`.
    pub fn evaluate_total_cost(&self, state: &S) -> Result<f64> {
        let mut total = 0.0;
        for (i, block) in self.blocks.iter().enumerate() {
            let cost = 0.5 * block.evaluate(state)?.value.norm_squared();
            if !cost.is_finite() {
                return Err(Error::NonFiniteCost { block: i });
            }
            total += cost;
        }
        Ok(total)
    }

    /// `(JᵀJ)⁻¹` at `state`.
    pub fn recover_covariance(&self, state: &S) -> Result<DMatrix<f64>> {
        let (_, j) = self.linearize(state)?;
        invert_information(&(j.transpose() * j))
    }
}

/// Relative eigenvalue threshold below which an information matrix counts as singular.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Inverts a symmetric information matrix, refusing rank-deficient input.
pub fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = info.nrows();
    let sym = (info + info.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let threshold = RANK_TOLERANCE * max;
    let rank = eig.eigenvalues.iter().filter(|&&l| l > threshold).count();
    if max <= 0.0 || rank < dim {
        return Err(Error::RankDeficient { rank: if max <= 0.0 { 0 } else { rank }, dim });
    }
    let chol = sym.cholesky().ok_or(Error::RankDeficient { rank, dim })?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Initial factor applied to λ after a rejected step; doubles on each
    /// consecutive rejection and resets after an accepted one.
    pub lambda_increase: f64,
    /// Largest shrink of λ after an accepted step (reached for a gain ratio of one).
    pub lambda_decrease: f64,
    pub gradient_tolerance: f64,
    pub function_tolerance: f64,
    pub parameter_tolerance: f64,
    /// Smallest ratio of actual to predicted cost decrease for a step to be accepted.
    pub min_relative_decrease: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_lambda: 1e-4,
            lambda_increase: 2.0,
            lambda_decrease: 1.0 / 3.0,
            gradient_tolerance: 1e-10,
            function_tolerance: 1e-8,
            parameter_tolerance: 1e-10,
            min_relative_decrease: 1e-3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lambda", self.initial_lambda),
            ("gradient_tolerance", self.gradient_tolerance),
            ("function_tolerance", self.function_tolerance),
            ("parameter_tolerance", self.parameter_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_relative_decrease) {
            return Err(Error::InvalidParameter("min_relative_decrease must be in [0, 1)".into()));
        }
        if !(self.lambda_increase.is_finite() && self.lambda_increase > 1.0)
            || !(self.lambda_decrease > 0.0 && self.lambda_decrease < 1.0)
        {
            return Err(Error::InvalidParameter(
                "lambda factors must be > 1 (increase) and in (0, 1) (decrease)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    CostChange,
    ParameterChange,
    MaxIterations,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Gradient => "gradient",
            Termination::CostChange => "cost_change",
            Termination::ParameterChange => "parameter_change",
            Termination::MaxIterations => "max_iterations",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    /// Loop iterations, rejected steps included.
    pub iterations: usize,
    pub successful_steps: usize,
    pub termination: Termination,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub wall_time_us: u64,
}

#[derive(Debug, Clone)]
pub struct SolverReport<S> {
    pub summary: SolverSummary,
    pub state: S,
}

// Bounds on the Marquardt diagonal, as in common LM implementations.
const MIN_DIAGONAL: f64 = 1e-6;
const MAX_DIAGONAL: f64 = 1e32;
const MIN_LAMBDA: f64 = 1e-16;
const MAX_LAMBDA: f64 = 1e32;

/// Minimizes `½ Σ ‖ρ(r(x))‖²` starting from `initial`.
///
/// Each iteration solves `(JᵀJ + λ D) Δ = -Jᵀρ` with `D = diag(JᵀJ)` and
/// accepts the step only if the cost decreases by at least `min_relative_decrease`
/// of the decrease predicted by the linearization. The relative cost-change test
/// is applied to every candidate step, accepted or not.
pub fn solve<S: Manifold>(problem: &Problem<S>, initial: S, config: &SolverConfig) -> Result<SolverReport<S>> {
    config.validate()?;
    let start = Instant::now();
    let mut state = initial;
    let (mut f, mut j) = problem.linearize(&state)?;
    let mut cost = 0.5 * f.norm_squared();
    let initial_cost = cost;
    let mut lambda = config.initial_lambda;
    let mut increase = config.lambda_increase;
    let mut iterations = 0;
    let mut successful_steps = 0;

    let termination = loop {
        let gradient = j.transpose() * &f;
        if gradient.amax() <= config.gradient_tolerance {
            break Termination::Gradient;
        }
        if iterations >= config.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let jtj = j.transpose() * &j;
        let mut lhs = jtj.clone();
        for i in 0..lhs.nrows() {
            lhs[(i, i)] += lambda * jtj[(i, i)].clamp(MIN_DIAGONAL, MAX_DIAGONAL);
        }
        let Some(chol) = lhs.cholesky() else {
            lambda = (lambda * increase).min(MAX_LAMBDA);
            increase *= 2.0;
            continue;
        };
        let step = chol.solve(&(-&gradient));

        if step.norm() <= config.parameter_tolerance * (state.norm() + config.parameter_tolerance) {
            break Termination::ParameterChange;
        }

        let candidate = state.retract(&step);
        let linearized = problem.linearize(&candidate);
        let candidate_cost = match &linearized {
            Ok((fc, _)) => 0.5 * fc.norm_squared(),
            Err(Error::NonFiniteCost { .. }) => f64::INFINITY,
            Err(_) => return linearized.map(|_| unreachable!()),
        };
        let converged = (cost - candidate_cost).abs() <= config.function_tolerance * cost;

        // ½‖f‖² - ½‖f + JΔ‖²
        let predicted = -(gradient.dot(&step) + 0.5 * (&j * &step).norm_squared());
        let ratio = (cost - candidate_cost) / predicted;
        if candidate_cost < cost && ratio > config.min_relative_decrease {
            let (fc, jc) = linearized?;
            state = candidate;
            f = fc;
            j = jc;
            cost = candidate_cost;
            successful_steps += 1;
            // Poor but acceptable steps raise λ instead of lowering it.
            lambda = (lambda * config.lambda_decrease.max(1.0 - (2.0 * ratio - 1.0).powi(3))).max(MIN_LAMBDA);
            increase = config.lambda_increase;
        } else {
            lambda = (lambda * increase).min(MAX_LAMBDA);
            increase *= 2.0;
        }
        trace!(
            "iteration {iterations}: cost {cost:.6e} candidate {candidate_cost:.6e} ratio {ratio:.3e} lambda {lambda:.3e} |step| {:.3e}",
            step.norm()
        );
        if converged {
            break Termination::CostChange;
        }
    };

    Ok(SolverReport {
        summary: SolverSummary {
            iterations,
            successful_steps,
            termination,
            initial_cost,
            final_cost: cost,
            wall_time_us: start.elapsed().as_micros() as u64,
        },
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{GaussianComponent, GaussianMixture};
    use crate::loss::{GaussianLoss, LossKind, MixtureLoss, MixtureLossConfig};

    fn quadratic(mean: f64, sigma: f64) -> Problem<DVector<f64>> {
        let mut p = Problem::new();
        p.add_block(LossBlock::identity(1, Arc::new(GaussianLoss::from_std_dev(mean, sigma).unwrap())));
        p
    }

    #[test]
    fn quadratic_converges_in_three_iterations() {
        let report = solve(&quadratic(3.0, 1.0), DVector::from_element(1, 0.0), &SolverConfig::default()).unwrap();
        assert!((report.state[0] - 3.0).abs() < 1e-10);
        assert!(report.summary.iterations <= 3, "{:?}", report.summary);
        assert_eq!(report.summary.termination, Termination::Gradient);
        assert!(report.summary.final_cost <= report.summary.initial_cost);
    }

    #[test]
    fn empty_problem_costs_nothing() {
        let p: Problem<DVector<f64>> = Problem::new();
        assert_eq!(p.evaluate_total_cost(&DVector::zeros(2)).unwrap(), 0.0);
        assert_eq!(quadratic(3.0, 1.0).evaluate_total_cost(&DVector::from_element(1, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_covariance_is_exact() {
        let p = quadratic(1.0, 2.0);
        let cov = p.recover_covariance(&DVector::from_element(1, 1.0)).unwrap();
        assert!((cov[(0, 0)] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let mut p: Problem<DVector<f64>> = Problem::new();
        let loss = Arc::new(GaussianLoss::from_std_dev(0.0, 1.0).unwrap());
        p.add_block(LossBlock::new(vec![0], loss, |x: &DVector<f64>| {
            Ok((DVector::from_element(1, x[0]), DMatrix::from_element(1, 1, 1.0)))
        }));
        let err = p.recover_covariance(&DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 1, dim: 2 }), "{err}");
    }

    #[test]
    fn non_finite_initial_cost_is_rejected() {
        let mut p: Problem<DVector<f64>> = Problem::new();
        let loss = Arc::new(GaussianLoss::from_std_dev(0.0, 1.0).unwrap());
        p.add_block(LossBlock::identity(1, loss.clone()));
        p.add_block(LossBlock::new(vec![0], loss, |_: &DVector<f64>| {
            Ok((DVector::from_element(1, f64::NAN), DMatrix::from_element(1, 1, 1.0)))
        }));
        let err = solve(&p, DVector::zeros(1), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteCost { block: 1 }));
    }

    #[test]
    fn msm_single_component_converges() {
        let mixture = GaussianMixture::new(vec![GaussianComponent::from_std_dev(1.0, 0.5, 0.7).unwrap()]).unwrap();
        let loss = Arc::new(
            MixtureLoss::new(LossKind::MaxSumMixture, Arc::new(mixture), MixtureLossConfig::default()).unwrap(),
        );
        let mut p = Problem::new();
        p.add_block(LossBlock::identity(1, loss));
        for x0 in [-4.0, -1.3, 0.5, 2.2, 4.0] {
            let report = solve(&p, DVector::from_element(1, x0), &SolverConfig::default()).unwrap();
            assert!((report.state[0] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SolverConfig { max_iterations: 0, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SolverConfig { gradient_tolerance: 0.0, ..SolverConfig::default() };
        assert!(bad.validate().is_err());
    }
}
