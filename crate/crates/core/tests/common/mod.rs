#![allow(dead_code)]

use std::f64::consts::PI;

use mixlsq::experiments::{trial_rng, MixtureSamplingSpec};
use mixlsq::gmm::{exponents, scalings};
use mixlsq::{GaussianMixture, Loss};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// A two-component mixture drawn like the plain experiment corpus, and a residual in `±6`.
pub fn sampled_pair(seed: u64, index: u64) -> (GaussianMixture, DVector<f64>) {
    let mut rng = trial_rng(seed, 0x7e57, index);
    let dim = 1 + (index % 2) as usize;
    let symmetric = (index / 2).is_multiple_of(2);
    let mixture = MixtureSamplingSpec::default().sample(dim, symmetric, &mut rng).unwrap();
    let r = DVector::from_fn(dim, |_, _| rng.random_range(-6.0..=6.0));
    (mixture, r)
}

/// `-ln p(r)` from the textbook density, minus the `(D/2) ln 2π` the compressed form drops.
pub fn naive_nll(mixture: &GaussianMixture, r: &DVector<f64>) -> f64 {
    let d = r.len() as f64;
    let density: f64 = mixture
        .components()
        .iter()
        .map(|c| {
            let cov = c.covariance();
            let diff = r - c.mean();
            let maha = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[0];
            c.weight() * (-0.5 * maha).exp() / ((2.0 * PI).powf(d / 2.0) * cov.determinant().sqrt())
        })
        .sum();
    -density.ln() - 0.5 * d * (2.0 * PI).ln()
}

/// Gap between the best and second best `ln s_l + e_l`; small near dominance switches.
pub fn dominance_gap(mixture: &GaussianMixture, r: &DVector<f64>) -> f64 {
    let s = scalings(mixture);
    let e = exponents(mixture, r).unwrap();
    let mut v: Vec<f64> = s.iter().zip(&e).map(|(s, e)| s.ln() + e).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    if v.len() < 2 {
        f64::INFINITY
    } else {
        v[0] - v[1]
    }
}

/// Central differences of `loss.value`.
pub fn fd_jacobian(loss: &dyn Loss, r: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let rows = loss.evaluate(r).unwrap().value.len();
    let mut j = DMatrix::zeros(rows, r.len());
    for c in 0..r.len() {
        let mut p = r.clone();
        let mut m = r.clone();
        p[c] += step;
        m[c] -= step;
        let diff = (loss.evaluate(&p).unwrap().value - loss.evaluate(&m).unwrap().value) / (2.0 * step);
        j.set_column(c, &diff);
    }
    j
}

/// `-2 ln Σ (s_l/γ) exp(e_l - e_k)` for the Max-Sum-Mixture, before any flooring.
pub fn msm_sqrt_argument(mixture: &GaussianMixture, r: &DVector<f64>, gamma: f64) -> f64 {
    let s = scalings(mixture);
    let e = exponents(mixture, r).unwrap();
    let k = mixlsq::gmm::dominant_component(&s, &e);
    let ek = e[k];
    let sum: f64 = s.iter().zip(&e).map(|(s, e)| s / gamma * (e - ek).exp()).sum();
    -2.0 * sum.ln()
}
