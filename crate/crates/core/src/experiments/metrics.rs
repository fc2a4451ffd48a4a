//! Accuracy and credibility metrics over trial records.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::TrialRecord;
use crate::loss::LossKind;
use crate::solver::Termination;

/// `sqrt(mean(e²))` over the values picked by `selector`; `None` if nothing was picked.
pub fn compute_rmse<F>(records: &[TrialRecord], selector: F) -> Option<f64>
where
    F: Fn(&TrialRecord) -> Option<f64>,
{
    let (sum, n) = records.iter().filter_map(selector).fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// `εᵀ Σ⁻¹ ε / d`.
pub fn nees(error: &DVector<f64>, covariance: &DMatrix<f64>) -> Result<f64> {
    let d = error.len();
    if covariance.nrows() != d || covariance.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: covariance.nrows() });
    }
    let chol = covariance.clone().cholesky().ok_or(Error::RankDeficient { rank: 0, dim: d })?;
    Ok(error.dot(&chol.solve(error)) / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AneesSummary {
    pub anees: Option<f64>,
    pub used: usize,
    /// Records without a usable covariance.
    pub excluded: usize,
}

pub fn compute_anees(records: &[TrialRecord]) -> AneesSummary {
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for r in records {
        match r.nees() {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    AneesSummary { anees: (used > 0).then(|| sum / used as f64), used, excluded }
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossAggregate {
    pub loss: LossKind,
    pub runs: usize,
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_successful: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse_rot_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anees: Option<AneesSummary>,
    pub mean_iterations: f64,
    pub mean_time_us: f64,
    pub max_iteration_runs: usize,
}

/// Aggregates per loss. With a `success_threshold`, success rate and the
/// successful-only RMSE are filled in; with `credibility`, rotational RMSE and ANEES.
pub fn aggregate_by_loss(
    records: &[TrialRecord],
    success_threshold: Option<f64>,
    credibility: bool,
) -> Vec<LossAggregate> {
    let mut groups: BTreeMap<LossKind, Vec<TrialRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.loss).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(loss, rs)| {
            let n = rs.len() as f64;
            let successful = success_threshold.map(|t| rs.iter().filter(|r| r.error_trans < t).count());
            LossAggregate {
                loss,
                runs: rs.len(),
                rmse: compute_rmse(&rs, |r| Some(r.error_trans)),
                rmse_successful: success_threshold
                    .and_then(|t| compute_rmse(&rs, |r| (r.error_trans < t).then_some(r.error_trans))),
                success_rate: successful.map(|s| s as f64 / n),
                rmse_rot_deg: if credibility { compute_rmse(&rs, |r| r.error_rot) } else { None },
                anees: credibility.then(|| compute_anees(&rs)),
                mean_iterations: rs.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
                mean_time_us: rs.iter().map(|r| r.time_us as f64).sum::<f64>() / n,
                max_iteration_runs: rs.iter().filter(|r| r.termination == Termination::MaxIterations).count(),
            }
        })
        .collect()
}
