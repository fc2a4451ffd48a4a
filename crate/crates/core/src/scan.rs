//! Cost and pseudo-Hessian surfaces of a loss over a regular grid.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::experiments::records::OutputMeta;
use crate::gmm::SearchGrid;
use crate::loss::Loss;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSample {
    pub point: Vec<f64>,
    /// `½‖ρ‖²`.
    pub cost: f64,
    /// `JᵀJ` of the loss with respect to the residual.
    pub pseudo_hessian: DMatrix<f64>,
}

impl ScanSample {
    pub fn min_eigenvalue(&self) -> f64 {
        self.pseudo_hessian.clone().symmetric_eigenvalues().min()
    }
}

/// Evaluates `loss` on every point of `[lo, hi]^D` with spacing `step`
/// (`D` is 1 or 2; first axis slowest).
pub fn scan_loss(loss: &dyn Loss, lo: f64, hi: f64, step: f64) -> Result<Vec<ScanSample>> {
    let dim = loss.dimension();
    if !(1..=2).contains(&dim) {
        return Err(Error::InvalidParameter(format!("scans support 1 or 2 dimensions, got {dim}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidParameter(format!("invalid scan range {lo}:{hi}")));
    }
    let grid = SearchGrid { lower: vec![lo; dim], upper: vec![hi; dim], resolution: step };
    grid.check(dim)?;
    (0..grid.len())
        .map(|i| {
            let x = grid.point(i);
            let ev = loss.evaluate(&x)?;
            Ok(ScanSample { point: x.as_slice().to_vec(), cost: ev.cost(), pseudo_hessian: ev.pseudo_hessian() })
        })
        .collect()
}

/// 1D: `x,cost,pseudo_hessian`. 2D: `x,y,cost,h_xx,h_xy,h_yy,h_min_eig`.
pub fn write_scan_csv<W: Write>(mut out: W, meta: Option<&OutputMeta>, samples: &[ScanSample]) -> Result<()> {
    if let Some(m) = meta {
        writeln!(out, "# seed={} version={} config_hash={}", m.seed, m.version, m.config_hash)?;
        if let Some(ts) = &m.generated_at {
            writeln!(out, "# generated={ts}")?;
        }
    }
    let dim = samples.first().map_or(1, |s| s.point.len());
    if dim == 1 {
        writeln!(out, "x,cost,pseudo_hessian")?;
        for s in samples {
            writeln!(out, "{},{},{}", s.point[0], s.cost, s.pseudo_hessian[(0, 0)])?;
        }
    } else {
        writeln!(out, "x,y,cost,h_xx,h_xy,h_yy,h_min_eig")?;
        for s in samples {
            let h = &s.pseudo_hessian;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.point[0],
                s.point[1],
                s.cost,
                h[(0, 0)],
                h[(0, 1)],
                h[(1, 1)],
                s.min_eigenvalue()
            )?;
        }
    }
    Ok(())
}
