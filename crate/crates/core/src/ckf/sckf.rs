//! Iterated constraint projection (smoothly constrained Kalman filter).
//!
//! Each pass relinearizes the constraints at the current estimate and applies
//! them one row at a time as scalar measurements whose variance is a shrinking
//! fraction of the row's own prior variance. The working covariance starts at
//! the a posteriori covariance and is reduced as rows are applied; only the
//! state leaves this module.

use super::constraints::{build_constraints, ConstraintSystem, KneeLimits};
use super::model::NoiseConfig;
use super::state::{symmetrize, Covariance, FilterState, StateVector};
use crate::body::{BodyDimensions, InstrumentedOrientations};
use crate::error::Result;

/// Residual below which a row counts as exactly satisfied.
const FEASIBLE_TOL: f64 = 1e-9;
/// Residual a row must reach, alongside the ratio test, to stop iterating.
const CONVERGED_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SckfOutcome {
    pub state: FilterState,
    /// Number of constraint relinearizations performed.
    pub iterations: usize,
    pub converged: bool,
    /// Constraint residuals (meters) at the returned state.
    pub residuals: Vec<f64>,
}

/// `max_j(D_ij² P_jj) / (D_i P D_iᵀ)`; infinite when the row variance vanishes.
pub fn termination_ratio(row: &nalgebra::RowSVector<f64, 18>, p: &Covariance) -> f64 {
    let dpd = (row * p * row.transpose())[0];
    let peak = (0..18)
        .map(|j| row[j] * row[j] * p[(j, j)])
        .fold(0.0, f64::max);
    if dpd <= peak * 1e-14 {
        f64::INFINITY
    } else {
        peak / dpd
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, r| m.max(r.abs()))
}

fn apply_rows(x: &mut StateVector, p: &mut Covariance, sys: &ConstraintSystem, weight: f64) {
    for row in &sys.rows {
        let pd = *p * row.d_row.transpose();
        let dpd = (row.d_row * pd)[0];
        if !(dpd > 1e-300) {
            continue;
        }
        let r = weight * dpd;
        let gain = pd / (dpd + r);
        let innovation = row.d - (row.d_row * *x)[0];
        *x += gain * innovation;
        *p -= gain * pd.transpose();
        symmetrize(p);
    }
}

pub fn sckf_project(
    state: &FilterState,
    oris: &InstrumentedOrientations,
    dims: &BodyDimensions,
    knee_max: &KneeLimits,
    cfg: &NoiseConfig,
) -> Result<SckfOutcome> {
    let mut x = state.x;
    let mut p = state.p;
    let mut best: Option<(f64, StateVector, Vec<f64>)> = None;

    for iteration in 1..=cfg.max_sckf_iterations {
        let probe = FilterState::new(x, p);
        let sys = build_constraints(&probe, oris, dims, knee_max)?;
        let residuals = sys.residuals(&x);
        let worst = max_abs(&residuals);
        if best.as_ref().is_none_or(|(b, _, _)| worst < *b) {
            best = Some((worst, x, residuals.clone()));
        }

        let feasible = worst <= FEASIBLE_TOL;
        let settled = worst <= CONVERGED_TOL
            && sys
                .rows
                .iter()
                .all(|r| termination_ratio(&r.d_row, &p) >= cfg.sckf_threshold);
        if feasible || settled {
            return Ok(SckfOutcome {
                state: FilterState::new(x, state.p),
                iterations: iteration,
                converged: true,
                residuals,
            });
        }
        if iteration == cfg.max_sckf_iterations {
            break;
        }

        let weight = cfg.sckf_alpha * (-((iteration - 1) as f64)).exp();
        apply_rows(&mut x, &mut p, &sys, weight);
    }

    let (worst, x, residuals) = best.expect("at least one iteration runs");
    log::warn!(
        "constraint projection stopped after {} iterations with residual {worst:.3e} m",
        cfg.max_sckf_iterations
    );
    Ok(SckfOutcome {
        state: FilterState::new(x, state.p),
        iterations: cfg.max_sckf_iterations,
        converged: false,
        residuals,
    })
}
