//! Least-squares loss functions for Gaussian mixtures.
//!
//! Every loss maps a raw residual `r` to a vector `ρ(r)` such that `½‖ρ(r)‖²`
//! is the negative log-likelihood of the attached model plus a constant, and
//! returns the analytical Jacobian `∂ρ/∂r` alongside.
//!
//! | loss | `len(ρ)` | `½‖ρ‖²` |
//! |------|----------|---------|
//! | Max-Mixture (MM)      | `D + 1` | `-log(max_l s_l e^{e_l}) + log γ_m` |
//! | Sum-Mixture (SM)      | `1`     | `NLL(r) + log γ_s` |
//! | Max-Sum-Mixture (MSM) | `D + 1` | `NLL(r) + log γ_ms` |
//!
//! with `γ_m = max_l s_l`, `γ_s = Σ_l s_l` and `γ_ms = L · max_l s_l + δ`.
//! MSM keeps the dominant component `k` as an exactly linear block
//! `U_k (r - μ_k)` and moves the remaining log-sum into one extra scalar row,
//! which is bounded below by zero for any `δ ≥ 0`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{dominant_component, GaussianMixture};

/// Tolerance on the MSM square-root argument before it is declared an invariant violation.
pub const MSM_ARGUMENT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "mm")]
    MaxMixture,
    #[serde(rename = "sm")]
    SumMixture,
    #[serde(rename = "msm")]
    MaxSumMixture,
    #[serde(rename = "dcs")]
    Dcs,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::MaxMixture, LossKind::SumMixture, LossKind::MaxSumMixture, LossKind::Dcs];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::MaxMixture => "mm",
            LossKind::SumMixture => "sm",
            LossKind::MaxSumMixture => "msm",
            LossKind::Dcs => "dcs",
        }
    }

    /// Whether the loss represents a full mixture (DCS is a symmetric M-estimator).
    pub fn is_mixture(self) -> bool {
        !matches!(self, LossKind::Dcs)
    }

    /// Parses a comma separated list such as `mm,sm,msm`.
    pub fn parse_list(list: &str) -> Result<Vec<LossKind>> {
        let mut out = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let kind: LossKind = name.parse()?;
            if !out.contains(&kind) {
                out.push(kind);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidParameter("empty loss selection".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let valid: Vec<_> = LossKind::ALL.iter().map(|k| k.name()).collect();
            Error::InvalidParameter(format!("unknown loss `{s}`, valid names are: {}", valid.join(", ")))
        })
    }
}

/// How `γ_m` and `γ_s` relate to their lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `γ` equals its bound.
    Tight,
    /// `γ = factor · bound`, `factor ≥ 1`.
    Scaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureLossConfig {
    /// `δ` in `γ_ms = L · max s + δ`.
    pub damping: f64,
    /// Floor applied inside square roots whose argument may reach zero.
    pub sqrt_epsilon: f64,
    pub normalization: Normalization,
}

impl Default for MixtureLossConfig {
    fn default() -> Self {
        Self { damping: 10.0, sqrt_epsilon: 1e-10, normalization: Normalization::Tight }
    }
}

impl MixtureLossConfig {
    pub fn with_damping(damping: f64) -> Self {
        Self { damping, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(Error::InvalidParameter(format!("damping must be >= 0, got {}", self.damping)));
        }
        if !(self.sqrt_epsilon.is_finite() && self.sqrt_epsilon > 0.0) {
            return Err(Error::InvalidParameter("sqrt_epsilon must be > 0".into()));
        }
        if let Normalization::Scaled(f) = self.normalization {
            if !(f.is_finite() && f >= 1.0) {
                return Err(Error::InvalidParameter("normalization factor must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn scale(&self, bound: f64) -> f64 {
        match self.normalization {
            Normalization::Tight => bound,
            Normalization::Scaled(f) => f * bound,
        }
    }
}

/// Stacked loss vector and its Jacobian with respect to the raw residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub value: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl LossEvaluation {
    /// `½‖ρ‖²`.
    pub fn cost(&self) -> f64 {
        0.5 * self.value.norm_squared()
    }

    /// `JᵀJ`.
    pub fn pseudo_hessian(&self) -> DMatrix<f64> {
        self.jacobian.transpose() * &self.jacobian
    }
}

pub fn normalization_mm(mixture: &GaussianMixture, config: &MixtureLossConfig) -> f64 {
    config.scale(max_scaling(mixture))
}

pub fn normalization_sm(mixture: &GaussianMixture, config: &MixtureLossConfig) -> f64 {
    config.scale(mixture.scalings().iter().sum())
}

pub fn normalization_msm(mixture: &GaussianMixture, config: &MixtureLossConfig) -> f64 {
    mixture.len() as f64 * max_scaling(mixture) + config.damping
}

fn max_scaling(mixture: &GaussianMixture) -> f64 {
    mixture.scalings().into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-component quantities shared by all three mixture losses.
struct Terms {
    scalings: Vec<f64>,
    exponents: Vec<f64>,
    whitened: Vec<DVector<f64>>,
    k: usize,
}

impl Terms {
    fn new(mixture: &GaussianMixture, r: &DVector<f64>) -> Result<Self> {
        if r.len() != mixture.dimension() {
            return Err(Error::DimensionMismatch { expected: mixture.dimension(), actual: r.len() });
        }
        let whitened: Vec<_> = mixture.components().iter().map(|c| c.whiten(r)).collect();
        let exponents: Vec<_> = whitened.iter().map(|z| -0.5 * z.norm_squared()).collect();
        let scalings = mixture.scalings();
        let k = dominant_component(&scalings, &exponents);
        Ok(Self { scalings, exponents, whitened, k })
    }

    /// `(s_l / γ) exp(e_l - e_k)` for every component.
    fn relative_terms(&self, gamma: f64) -> Vec<f64> {
        let ek = self.exponents[self.k];
        self.scalings.iter().zip(&self.exponents).map(|(s, e)| s / gamma * (e - ek).exp()).collect()
    }

    /// `I_l (r - μ_l) = U_lᵀ U_l (r - μ_l)`.
    fn pull(&self, mixture: &GaussianMixture, l: usize) -> DVector<f64> {
        mixture.components()[l].sqrt_info().transpose() * &self.whitened[l]
    }
}

/// Max-Sum-Mixture loss.
///
/// # Panics
///
/// If the square-root argument of the nonlinear row is below
/// `-MSM_ARGUMENT_TOLERANCE`. The normalization makes this impossible for
/// valid mixtures, so a panic means a broken invariant.
pub fn evaluate_msm(mixture: &GaussianMixture, config: &MixtureLossConfig, r: &DVector<f64>) -> Result<LossEvaluation> {
    let dim = mixture.dimension();
    let t = Terms::new(mixture, r)?;
    let gamma = normalization_msm(mixture, config);
    let rel = t.relative_terms(gamma);
    let sum: f64 = rel.iter().sum();
    let arg = -2.0 * sum.ln();
    assert!(arg >= -MSM_ARGUMENT_TOLERANCE, "Max-Sum-Mixture square-root argument {arg} is negative");
    let nonlinear = arg.max(0.0).sqrt();

    let k_pull = t.pull(mixture, t.k);
    let mut numerator = DVector::zeros(dim);
    for (l, w) in rel.iter().enumerate() {
        if l != t.k {
            numerator.axpy(*w, &(t.pull(mixture, l) - &k_pull), 1.0);
        }
    }
    let row = numerator / (sum * arg.max(config.sqrt_epsilon).sqrt());

    let dominant = &mixture.components()[t.k];
    let mut value = DVector::zeros(dim + 1);
    value.rows_mut(0, dim).copy_from(&t.whitened[t.k]);
    value[dim] = nonlinear;
    let mut jacobian = DMatrix::zeros(dim + 1, dim);
    jacobian.view_mut((0, 0), (dim, dim)).copy_from(dominant.sqrt_info());
    jacobian.row_mut(dim).copy_from(&row.transpose());
    Ok(LossEvaluation { value, jacobian })
}

/// Max-Mixture loss: the locally dominant component plus a constant row.
pub fn evaluate_mm(mixture: &GaussianMixture, config: &MixtureLossConfig, r: &DVector<f64>) -> Result<LossEvaluation> {
    let dim = mixture.dimension();
    let t = Terms::new(mixture, r)?;
    let gamma = normalization_mm(mixture, config);
    let ratio = t.scalings[t.k] / gamma;
    // ratio ≤ 1; clamp the rounding of the k = argmax s case.
    let constant = (-2.0 * ratio.ln()).max(0.0).sqrt();

    let mut value = DVector::zeros(dim + 1);
    value.rows_mut(0, dim).copy_from(&t.whitened[t.k]);
    value[dim] = constant;
    let mut jacobian = DMatrix::zeros(dim + 1, dim);
    jacobian.view_mut((0, 0), (dim, dim)).copy_from(mixture.components()[t.k].sqrt_info());
    Ok(LossEvaluation { value, jacobian })
}

/// Sum-Mixture loss: one scalar row carrying the whole negative log-likelihood.
///
/// The square-root argument is floored at `sqrt_epsilon`; where the floor is
/// active the Jacobian is evaluated at the floored value.
pub fn evaluate_sm(mixture: &GaussianMixture, config: &MixtureLossConfig, r: &DVector<f64>) -> Result<LossEvaluation> {
    let dim = mixture.dimension();
    let t = Terms::new(mixture, r)?;
    let gamma = normalization_sm(mixture, config);
    let rel = t.relative_terms(gamma);
    let sum: f64 = rel.iter().sum();
    let arg = -2.0 * t.exponents[t.k] - 2.0 * sum.ln();
    let rho = arg.max(config.sqrt_epsilon).sqrt();

    let mut numerator = DVector::zeros(dim);
    for (l, w) in rel.iter().enumerate() {
        numerator.axpy(*w, &t.pull(mixture, l), 1.0);
    }
    let row = numerator / (sum * rho);
    Ok(LossEvaluation {
        value: DVector::from_element(1, rho),
        jacobian: DMatrix::from_row_slice(1, dim, row.as_slice()),
    })
}

pub fn evaluate_mixture_loss(
    kind: LossKind,
    mixture: &GaussianMixture,
    config: &MixtureLossConfig,
    r: &DVector<f64>,
) -> Result<LossEvaluation> {
    match kind {
        LossKind::MaxMixture => evaluate_mm(mixture, config, r),
        LossKind::SumMixture => evaluate_sm(mixture, config, r),
        LossKind::MaxSumMixture => evaluate_msm(mixture, config, r),
        LossKind::Dcs => Err(Error::UnsupportedLoss("dcs".into())),
    }
}

/// Dynamic Covariance Scaling factor `min(1, 2φ / (φ + ‖r‖²))`.
pub fn dcs_scale(phi: f64, squared_norm: f64) -> f64 {
    (2.0 * phi / (phi + squared_norm)).min(1.0)
}

/// Dynamic Covariance Scaling on an already whitened residual.
///
/// The cost is the M-estimator whose IRLS weight is the squared DCS factor:
/// `χ²` inside `χ² ≤ φ` and `φ (3χ² - φ) / (φ + χ²)` outside, which saturates
/// at `3φ`. It is returned as `ρ = w · r` with `w = sqrt(cost / χ²)`, so the
/// inlier region passes `r` through unchanged.
pub fn evaluate_dcs(phi: f64, r: &DVector<f64>) -> Result<LossEvaluation> {
    if !(phi.is_finite() && phi > 0.0) {
        return Err(Error::InvalidParameter(format!("DCS phi must be > 0, got {phi}")));
    }
    let dim = r.len();
    let chi2 = r.norm_squared();
    if chi2 <= phi {
        return Ok(LossEvaluation { value: r.clone(), jacobian: DMatrix::identity(dim, dim) });
    }
    // g(u) = ρ(u) / u with ρ(u) = φ(3u - φ)/(φ + u); w = sqrt(g).
    let num = phi * (3.0 * chi2 - phi);
    let den = chi2 * (phi + chi2);
    let g = num / den;
    let dg = (3.0 * phi * den - num * (phi + 2.0 * chi2)) / (den * den);
    let w = g.sqrt();
    let dw_du = dg / (2.0 * w);
    let jacobian = DMatrix::identity(dim, dim) * w + r * r.transpose() * (2.0 * dw_du);
    Ok(LossEvaluation { value: r * w, jacobian })
}

/// A loss attached to a residual block.
pub trait Loss: Send + Sync + fmt::Debug {
    /// Dimension of the raw residual the loss accepts.
    fn dimension(&self) -> usize;

    fn evaluate(&self, r: &DVector<f64>) -> Result<LossEvaluation>;
}

/// One of the three mixture formulations bound to a mixture.
#[derive(Debug, Clone)]
pub struct MixtureLoss {
    kind: LossKind,
    mixture: Arc<GaussianMixture>,
    config: MixtureLossConfig,
}

impl MixtureLoss {
    pub fn new(kind: LossKind, mixture: Arc<GaussianMixture>, config: MixtureLossConfig) -> Result<Self> {
        if !kind.is_mixture() {
            return Err(Error::UnsupportedLoss(kind.to_string()));
        }
        config.validate()?;
        Ok(Self { kind, mixture, config })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn config(&self) -> &MixtureLossConfig {
        &self.config
    }

    /// `log γ` of the attached formulation.
    pub fn log_normalization(&self) -> f64 {
        match self.kind {
            LossKind::MaxMixture => normalization_mm(&self.mixture, &self.config).ln(),
            LossKind::SumMixture => normalization_sm(&self.mixture, &self.config).ln(),
            LossKind::MaxSumMixture => normalization_msm(&self.mixture, &self.config).ln(),
            LossKind::Dcs => unreachable!("rejected in MixtureLoss::new"),
        }
    }
}

impl Loss for MixtureLoss {
    fn dimension(&self) -> usize {
        self.mixture.dimension()
    }

    fn evaluate(&self, r: &DVector<f64>) -> Result<LossEvaluation> {
        evaluate_mixture_loss(self.kind, &self.mixture, &self.config, r)
    }
}

/// Plain Gaussian: `ρ = U (r - μ)`.
#[derive(Debug, Clone)]
pub struct GaussianLoss {
    mean: DVector<f64>,
    sqrt_info: DMatrix<f64>,
}

impl GaussianLoss {
    pub fn new(mean: DVector<f64>, sqrt_info: DMatrix<f64>) -> Result<Self> {
        if sqrt_info.nrows() != mean.len() || sqrt_info.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), actual: sqrt_info.ncols() });
        }
        Ok(Self { mean, sqrt_info })
    }

    pub fn from_std_dev(mean: f64, std_dev: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, 1.0 / std_dev))
    }
}

impl Loss for GaussianLoss {
    fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn evaluate(&self, r: &DVector<f64>) -> Result<LossEvaluation> {
        if r.len() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), actual: r.len() });
        }
        Ok(LossEvaluation { value: &self.sqrt_info * (r - &self.mean), jacobian: self.sqrt_info.clone() })
    }
}

/// DCS applied to `U (r - μ)`.
#[derive(Debug, Clone)]
pub struct DcsLoss {
    phi: f64,
    whitening: GaussianLoss,
}

impl DcsLoss {
    pub fn new(phi: f64, mean: DVector<f64>, sqrt_info: DMatrix<f64>) -> Result<Self> {
        if !(phi.is_finite() && phi > 0.0) {
            return Err(Error::InvalidParameter(format!("DCS phi must be > 0, got {phi}")));
        }
        Ok(Self { phi, whitening: GaussianLoss::new(mean, sqrt_info)? })
    }
}

impl Loss for DcsLoss {
    fn dimension(&self) -> usize {
        self.whitening.dimension()
    }

    fn evaluate(&self, r: &DVector<f64>) -> Result<LossEvaluation> {
        let white = self.whitening.evaluate(r)?;
        let dcs = evaluate_dcs(self.phi, &white.value)?;
        Ok(LossEvaluation { jacobian: dcs.jacobian * white.jacobian, value: dcs.value })
    }
}

/// Largest absolute entry of (central-difference Jacobian - analytical Jacobian).
pub fn loss_jacobian_fd_check(loss: &dyn Loss, r: &DVector<f64>, step: f64) -> Result<f64> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be > 0".into()));
    }
    let analytic = loss.evaluate(r)?;
    let mut worst: f64 = 0.0;
    for col in 0..r.len() {
        let mut plus = r.clone();
        let mut minus = r.clone();
        plus[col] += step;
        minus[col] -= step;
        let fd = (loss.evaluate(&plus)?.value - loss.evaluate(&minus)?.value) / (2.0 * step);
        for row in 0..fd.len() {
            worst = worst.max((fd[row] - analytic.jacobian[(row, col)]).abs());
        }
    }
    Ok(worst)
}
