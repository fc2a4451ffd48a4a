//! Gaussian mixtures in square-root information form.
//!
//! Densities are handled in the compressed form
//!
//! ```text
//! p(r) ∝ Σ_l s_l · exp(e_l(r)),   s_l = w_l · det(U_l),   e_l(r) = -½‖U_l (r - μ_l)‖²
//! ```
//!
//! where `U_l` is the upper-triangular square-root information matrix of
//! component `l`. The Gaussian normalization `(2π)^{-D/2}` is shared by all
//! components and is dropped everywhere, so [`GaussianMixture::negative_log_likelihood`]
//! is the exact negative log-likelihood up to that constant. It is the oracle
//! every loss formulation in [`crate::loss`] is checked against.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One weighted Gaussian. `sqrt_info` is always the upper-triangular Cholesky
/// factor of the information matrix, with a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    sqrt_info: DMatrix<f64>,
}

impl GaussianComponent {
    /// Builds a component from an already canonical square-root information matrix.
    pub fn new(weight: f64, mean: DVector<f64>, sqrt_info: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::InvalidMixture("component has zero dimension".into()));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::InvalidMixture(format!("weight must be positive, got {weight}")));
        }
        if sqrt_info.nrows() != dim || sqrt_info.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: sqrt_info.nrows().max(sqrt_info.ncols()) });
        }
        if mean.iter().chain(sqrt_info.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidMixture("non-finite mean or sqrt_info entry".into()));
        }
        for c in 0..dim {
            if sqrt_info[(c, c)] <= 0.0 {
                return Err(Error::InvalidMixture("sqrt_info must have a strictly positive diagonal".into()));
            }
            for r in (c + 1)..dim {
                if sqrt_info[(r, c)] != 0.0 {
                    return Err(Error::InvalidMixture("sqrt_info must be upper-triangular".into()));
                }
            }
        }
        Ok(Self { weight, mean, sqrt_info })
    }

    /// Builds a component from a symmetric positive definite information matrix.
    pub fn from_information(weight: f64, mean: DVector<f64>, information: &DMatrix<f64>) -> Result<Self> {
        let sym = (information + information.transpose()) * 0.5;
        let chol = sym
            .cholesky()
            .ok_or_else(|| Error::InvalidMixture("information matrix is not positive definite".into()))?;
        Self::new(weight, mean, chol.l().transpose())
    }

    pub fn from_covariance(weight: f64, mean: DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        let sym = (covariance + covariance.transpose()) * 0.5;
        let chol = sym.cholesky().ok_or_else(|| Error::InvalidMixture("covariance is not positive definite".into()))?;
        Self::from_information(weight, mean, &chol.inverse())
    }

    /// Axis-aligned component with independent standard deviations per dimension.
    pub fn from_std_devs(weight: f64, mean: DVector<f64>, std_devs: &[f64]) -> Result<Self> {
        if std_devs.len() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), actual: std_devs.len() });
        }
        if std_devs.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidMixture("standard deviations must be positive".into()));
        }
        let diag = DVector::from_iterator(std_devs.len(), std_devs.iter().map(|s| 1.0 / s));
        Self::new(weight, mean, DMatrix::from_diagonal(&diag))
    }

    /// Scalar component, `N(mean, std_dev²)`.
    pub fn from_std_dev(weight: f64, mean: f64, std_dev: f64) -> Result<Self> {
        Self::from_std_devs(weight, DVector::from_element(1, mean), &[std_dev])
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn sqrt_info(&self) -> &DMatrix<f64> {
        &self.sqrt_info
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// `UᵀU`.
    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.transpose() * &self.sqrt_info
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let inv = self
            .sqrt_info
            .solve_upper_triangular(&DMatrix::identity(self.dimension(), self.dimension()))
            .expect("sqrt_info has a positive diagonal");
        &inv * inv.transpose()
    }

    /// Product of the diagonal of the triangular factor.
    pub fn sqrt_info_det(&self) -> f64 {
        self.sqrt_info.diagonal().iter().product()
    }

    /// `s = w · det(U)`.
    pub fn scaling(&self) -> f64 {
        self.weight * self.sqrt_info_det()
    }

    /// `U (r - μ)`.
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.sqrt_info * (r - &self.mean)
    }

    fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// The per-component quantities of the compressed mixture notation at one residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledExponents {
    pub scalings: Vec<f64>,
    pub exponents: Vec<f64>,
    pub dominant_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    /// Weights are renormalized to sum to one.
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first =
            components.first().ok_or_else(|| Error::InvalidMixture("mixture needs at least one component".into()))?;
        let dim = first.dimension();
        if let Some(bad) = components.iter().find(|c| c.dimension() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, actual: bad.dimension() });
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !total.is_finite() {
            return Err(Error::InvalidMixture("weights do not sum to a finite value".into()));
        }
        let components = if (total - 1.0).abs() <= 4.0 * f64::EPSILON {
            components
        } else {
            components
                .into_iter()
                .map(|c| {
                    let w = c.weight / total;
                    c.with_weight(w)
                })
                .collect()
        };
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.components[0].dimension()
    }

    pub fn scalings(&self) -> Vec<f64> {
        self.components.iter().map(GaussianComponent::scaling).collect()
    }

    pub fn exponents(&self, r: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_dim(r)?;
        Ok(self.components.iter().map(|c| -0.5 * c.whiten(r).norm_squared()).collect())
    }

    pub fn scaled_exponents(&self, r: &DVector<f64>) -> Result<ScaledExponents> {
        let exponents = self.exponents(r)?;
        let scalings = self.scalings();
        let dominant_index = dominant_component(&scalings, &exponents);
        Ok(ScaledExponents { scalings, exponents, dominant_index })
    }

    /// `-log Σ s_l exp(e_l(r))`, evaluated without underflow.
    pub fn negative_log_likelihood(&self, r: &DVector<f64>) -> Result<f64> {
        let exponents = self.exponents(r)?;
        Ok(-log_sum_exp_robust(&self.scalings(), &exponents))
    }

    /// Negative log-likelihood together with its exact gradient and Hessian.
    pub fn nll_derivatives(&self, r: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.check_dim(r)?;
        let dim = self.dimension();
        let scalings = self.scalings();
        let mut exponents = Vec::with_capacity(self.len());
        let mut pulls = Vec::with_capacity(self.len());
        for c in &self.components {
            let z = c.whiten(r);
            exponents.push(-0.5 * z.norm_squared());
            pulls.push(c.sqrt_info.transpose() * z);
        }
        let lse = log_sum_exp_robust(&scalings, &exponents);
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for ((c, (s, e)), a) in self.components.iter().zip(scalings.iter().zip(&exponents)).zip(&pulls) {
            let p = (s.ln() + e - lse).exp();
            grad.axpy(p, a, 1.0);
            hess += (c.information() - a * a.transpose()) * p;
        }
        hess += &grad * grad.transpose();
        Ok((-lse, grad, hess))
    }

    /// Draws one sample; the component is chosen by weight.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sample_labeled(rng).1
    }

    /// Like [`Self::sample`], also returning the index of the drawn component.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, DVector<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut index = self.len() - 1;
        for (l, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                index = l;
                break;
            }
        }
        let c = &self.components[index];
        let z = DVector::from_fn(self.dimension(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let offset = c.sqrt_info.solve_upper_triangular(&z).expect("sqrt_info has a positive diagonal");
        (index, &c.mean + offset)
    }

    /// Global minimum of the negative log-likelihood: exhaustive grid search followed
    /// by Newton refinement from the best grid point.
    pub fn find_global_mode(&self, grid: &SearchGrid) -> Result<DVector<f64>> {
        grid.check(self.dimension())?;
        let values = FlatMixture::new(self).evaluate_grid(grid);
        let best =
            values.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
        let start = grid.point(best.0);
        let refined = self.refine_minimum(&start)?;
        if self.negative_log_likelihood(&refined)? <= best.1 {
            Ok(refined)
        } else {
            Ok(start)
        }
    }

    /// Distinct local minima of the negative log-likelihood inside the grid.
    ///
    /// Interior grid points whose value is strictly below all `3^D - 1` neighbours
    /// are refined by Newton iterations and merged when closer than
    /// [`MINIMA_MERGE_RADIUS`]. Sorted by ascending negative log-likelihood.
    pub fn local_minima(&self, grid: &SearchGrid) -> Result<Vec<DVector<f64>>> {
        grid.check(self.dimension())?;
        let values = FlatMixture::new(self).evaluate_grid(grid);
        let mut minima: Vec<(f64, DVector<f64>)> = Vec::new();
        for index in grid.interior_local_minima(&values) {
            let x = self.refine_minimum(&grid.point(index))?;
            if minima.iter().any(|(_, m)| (m - &x).norm() < MINIMA_MERGE_RADIUS) {
                continue;
            }
            minima.push((self.negative_log_likelihood(&x)?, x));
        }
        minima.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(minima.into_iter().map(|(_, x)| x).collect())
    }

    pub fn count_local_minima(&self, grid: &SearchGrid) -> Result<usize> {
        Ok(self.local_minima(grid)?.len())
    }

    /// Damped Newton descent on the exact negative log-likelihood.
    pub fn refine_minimum(&self, start: &DVector<f64>) -> Result<DVector<f64>> {
        let mut x = start.clone();
        let (mut f, mut g, mut h) = self.nll_derivatives(&x)?;
        for _ in 0..REFINE_MAX_ITERATIONS {
            let gnorm = g.norm();
            if gnorm < REFINE_GRADIENT_TOLERANCE {
                break;
            }
            let newton = h.clone().cholesky().map(|c| -c.solve(&g));
            let mut moved = false;
            if let Some(dir) = &newton {
                // Near the optimum the cost differences drown in rounding; a full
                // Newton step is then judged by the gradient norm instead.
                let x_try = &x + dir;
                let (f_try, g_try, h_try) = self.nll_derivatives(&x_try)?;
                if f_try < f || (f_try <= f + 1e-12 * f.abs().max(1.0) && g_try.norm() < gnorm) {
                    (x, f, g, h) = (x_try, f_try, g_try, h_try);
                    moved = true;
                }
            }
            if !moved {
                let dir = match newton {
                    Some(d) if d.dot(&g) < 0.0 => d,
                    _ => -&g,
                };
                let slope = dir.dot(&g);
                let mut t = 1.0;
                for _ in 0..60 {
                    let x_try = &x + &dir * t;
                    let f_try = self.negative_log_likelihood(&x_try)?;
                    if f_try <= f + 1e-4 * t * slope {
                        (f, g, h) = self.nll_derivatives(&x_try)?;
                        x = x_try;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if !moved {
                break;
            }
        }
        Ok(x)
    }

    fn check_dim(&self, r: &DVector<f64>) -> Result<()> {
        if r.len() != self.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), actual: r.len() });
        }
        Ok(())
    }
}

/// Candidates closer than this are treated as the same minimum.
pub const MINIMA_MERGE_RADIUS: f64 = 1e-3;
const REFINE_GRADIENT_TOLERANCE: f64 = 1e-10;
const REFINE_MAX_ITERATIONS: usize = 200;

/// `s_l = w_l det(U_l)` for every component.
pub fn scalings(mixture: &GaussianMixture) -> Vec<f64> {
    mixture.scalings()
}

/// `e_l = -½‖U_l (r - μ_l)‖²` for every component.
pub fn exponents(mixture: &GaussianMixture, r: &DVector<f64>) -> Result<Vec<f64>> {
    mixture.exponents(r)
}

pub fn negative_log_likelihood(mixture: &GaussianMixture, r: &DVector<f64>) -> Result<f64> {
    mixture.negative_log_likelihood(r)
}

/// Index of the locally dominant component, `argmax_l s_l exp(e_l)`, evaluated
/// as `argmax_l ln(s_l) + e_l`. Ties go to the lowest index.
pub fn dominant_component(scalings: &[f64], exponents: &[f64]) -> usize {
    assert_eq!(scalings.len(), exponents.len(), "scalings and exponents differ in length");
    assert!(!scalings.is_empty(), "empty mixture");
    let mut best = 0;
    let mut best_value = scalings[0].ln() + exponents[0];
    for (l, (s, e)) in scalings.iter().zip(exponents).enumerate().skip(1) {
        let v = s.ln() + e;
        if v > best_value {
            best = l;
            best_value = v;
        }
    }
    best
}

/// `log Σ s_l exp(e_l)` with the dominant exponent pulled out of the sum.
///
/// Every remaining term satisfies `s_l exp(e_l - e_k) ≤ s_k`, so nothing
/// overflows, and the sum is at least `s_k > 0`.
pub fn log_sum_exp_robust(scalings: &[f64], exponents: &[f64]) -> f64 {
    let k = dominant_component(scalings, exponents);
    let ek = exponents[k];
    let sum: f64 = scalings.iter().zip(exponents).map(|(s, e)| s * (e - ek).exp()).sum();
    ek + sum.ln()
}

/// Axis-aligned evaluation grid, inclusive of both bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: f64,
}

impl SearchGrid {
    pub fn symmetric(dim: usize, half_width: f64, resolution: f64) -> Self {
        Self { lower: vec![-half_width; dim], upper: vec![half_width; dim], resolution }
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn axis_len(&self, axis: usize) -> usize {
        ((self.upper[axis] - self.lower[axis]) / self.resolution).round() as usize + 1
    }

    pub fn len(&self) -> usize {
        (0..self.dimension()).map(|a| self.axis_len(a)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate along one axis. Computed from the index directly so that
    /// accumulated rounding never shifts the grid.
    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        let n = self.axis_len(axis);
        if n == 1 {
            return self.lower[axis];
        }
        let t = i as f64 / (n - 1) as f64;
        self.lower[axis] + t * (self.upper[axis] - self.lower[axis])
    }

    /// Point at a flat index; the first axis varies slowest.
    pub fn point(&self, flat: usize) -> DVector<f64> {
        let idx = self.unravel(flat);
        DVector::from_iterator(idx.len(), idx.iter().enumerate().map(|(a, i)| self.coordinate(a, *i)))
    }

    fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let dim = self.dimension();
        let mut idx = vec![0; dim];
        for a in (0..dim).rev() {
            let n = self.axis_len(a);
            idx[a] = flat % n;
            flat /= n;
        }
        idx
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        if self.dimension() != dim || self.upper.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: self.dimension() });
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::InvalidParameter("grid resolution must be positive".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
            return Err(Error::InvalidParameter("grid bounds must be finite with lower < upper".into()));
        }
        Ok(())
    }

    /// Interior flat indices strictly below every neighbour.
    fn interior_local_minima(&self, values: &[f64]) -> Vec<usize> {
        let dim = self.dimension();
        let lens: Vec<usize> = (0..dim).map(|a| self.axis_len(a)).collect();
        let mut strides = vec![1usize; dim];
        for a in (0..dim.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * lens[a + 1];
        }
        // Offsets of all 3^D - 1 neighbours.
        let mut offsets: Vec<isize> = vec![0];
        for stride in &strides {
            offsets = offsets.iter().flat_map(|o| [o - *stride as isize, *o, o + *stride as isize]).collect();
        }
        offsets.retain(|o| *o != 0);

        let mut out = Vec::new();
        'points: for (flat, v) in values.iter().enumerate() {
            let idx = self.unravel(flat);
            if idx.iter().zip(&lens).any(|(i, n)| *i == 0 || *i + 1 == *n) {
                continue;
            }
            for o in &offsets {
                if values[(flat as isize + o) as usize] <= *v {
                    continue 'points;
                }
            }
            out.push(flat);
        }
        out
    }
}

/// Allocation-free evaluator used for dense grid sweeps.
struct FlatMixture {
    dim: usize,
    log_scalings: Vec<f64>,
    means: Vec<f64>,
    // Row-major upper triangles, one dim×dim block per component.
    sqrt_info: Vec<f64>,
}

impl FlatMixture {
    fn new(m: &GaussianMixture) -> Self {
        let dim = m.dimension();
        let mut means = Vec::with_capacity(m.len() * dim);
        let mut sqrt_info = Vec::with_capacity(m.len() * dim * dim);
        for c in m.components() {
            means.extend(c.mean.iter());
            for r in 0..dim {
                for col in 0..dim {
                    sqrt_info.push(c.sqrt_info[(r, col)]);
                }
            }
        }
        Self { dim, log_scalings: m.scalings().iter().map(|s| s.ln()).collect(), means, sqrt_info }
    }

    fn nll(&self, x: &[f64], log_terms: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut best = f64::NEG_INFINITY;
        for (l, term) in log_terms.iter_mut().enumerate() {
            let mean = &self.means[l * d..(l + 1) * d];
            let u = &self.sqrt_info[l * d * d..(l + 1) * d * d];
            let mut sq = 0.0;
            for r in 0..d {
                let mut z = 0.0;
                for c in r..d {
                    z += u[r * d + c] * (x[c] - mean[c]);
                }
                sq += z * z;
            }
            *term = self.log_scalings[l] - 0.5 * sq;
            best = best.max(*term);
        }
        let sum: f64 = log_terms.iter().map(|t| (t - best).exp()).sum();
        -(best + sum.ln())
    }

    fn evaluate_grid(&self, grid: &SearchGrid) -> Vec<f64> {
        let mut log_terms = vec![0.0; self.log_scalings.len()];
        let mut x = vec![0.0; self.dim];
        (0..grid.len())
            .map(|flat| {
                for (a, i) in grid.unravel(flat).into_iter().enumerate() {
                    x[a] = grid.coordinate(a, i);
                }
                self.nll(&x, &mut log_terms)
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    components: Vec<ComponentRepr>,
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    weight: f64,
    mean: Vec<f64>,
    sqrt_info: Vec<Vec<f64>>,
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = Error;

    fn try_from(repr: MixtureRepr) -> Result<Self> {
        let components = repr
            .components
            .into_iter()
            .map(|c| {
                let dim = c.mean.len();
                if c.sqrt_info.len() != dim || c.sqrt_info.iter().any(|row| row.len() != dim) {
                    return Err(Error::InvalidMixture(format!("sqrt_info must be {dim}x{dim}")));
                }
                let u = DMatrix::from_fn(dim, dim, |r, col| c.sqrt_info[r][col]);
                GaussianComponent::new(c.weight, DVector::from_vec(c.mean), u)
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(components)
    }
}

impl From<GaussianMixture> for MixtureRepr {
    fn from(m: GaussianMixture) -> Self {
        let components = m
            .components
            .into_iter()
            .map(|c| {
                let dim = c.dimension();
                ComponentRepr {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    sqrt_info: (0..dim).map(|r| (0..dim).map(|col| c.sqrt_info[(r, col)]).collect()).collect(),
                }
            })
            .collect();
        MixtureRepr { components }
    }
}
