//! Linearized biomechanical constraints `D x = d`.

use nalgebra::{DMatrix, DVector, RowSVector};

use super::state::{ankle_pos_offset, FilterState, POS_MID_PELVIS, STATE_DIM};
use crate::body::{knee_angle, thigh_vector, BodyDimensions, InstrumentedOrientations, Side};
use crate::error::{Error, Result};
use crate::so3::{quat_to_rotation, rotate_vector, Vec3};

/// Active knee-range rows target this far inside the allowed range, so the
/// projected angle does not land outside it by round-off.
const KNEE_MARGIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    ThighLength,
    Hinge,
    KneeRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub side: Side,
    pub kind: ConstraintKind,
    pub d_row: RowSVector<f64, STATE_DIM>,
    pub d: f64,
}

impl ConstraintRow {
    /// `D x − d`, in meters.
    pub fn residual(&self, x: &super::state::StateVector) -> f64 {
        (self.d_row * x)[0] - self.d
    }
}

/// Upper knee-angle bound per side, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KneeLimits {
    pub left: f64,
    pub right: f64,
}

impl KneeLimits {
    pub fn get(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    pub fn unbounded() -> Self {
        Self {
            left: std::f64::consts::PI,
            right: std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub rows: Vec<ConstraintRow>,
}

impl ConstraintSystem {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), STATE_DIM, |i, j| self.rows[i].d_row[j])
    }

    pub fn d_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.d))
    }

    pub fn residuals(&self, x: &super::state::StateVector) -> Vec<f64> {
        self.rows.iter().map(|r| r.residual(x)).collect()
    }

    pub fn has(&self, side: Side, kind: ConstraintKind) -> bool {
        self.rows.iter().any(|r| r.side == side && r.kind == kind)
    }
}

/// Row `[v, −v, 0]` acting on mid-pelvis and one ankle position.
fn pelvis_ankle_row(v: &Vec3, side: Side) -> RowSVector<f64, STATE_DIM> {
    let mut row = RowSVector::<f64, STATE_DIM>::zeros();
    let a = ankle_pos_offset(side);
    for i in 0..3 {
        row[POS_MID_PELVIS + i] = v[i];
        row[a + i] = -v[i];
    }
    row
}

/// Knee angle of one leg at the given state.
pub fn state_knee_angle(
    state: &FilterState,
    oris: &InstrumentedOrientations,
    dims: &BodyDimensions,
    side: Side,
) -> Result<f64> {
    let tau = thigh_vector(state, &oris.pelvis, oris.shank(side), dims, side);
    let n = tau.norm();
    if n < 1e-6 {
        return Err(Error::DegenerateGeometry(format!("{} thigh vector has zero length", side.name())));
    }
    knee_angle(&(tau / n), &quat_to_rotation(oris.shank(side)))
}

/// Constraints linearized at `state`: per side thigh length and hinge, plus a
/// knee range row when the angle falls outside `[0, min(π, knee_max)]`.
pub fn build_constraints(
    state: &FilterState,
    oris: &InstrumentedOrientations,
    dims: &BodyDimensions,
    knee_max: &KneeLimits,
) -> Result<ConstraintSystem> {
    let mut rows = Vec::with_capacity(6);
    let pelvis_y = rotate_vector(&oris.pelvis, &Vec3::y());
    for side in Side::BOTH {
        let shank = quat_to_rotation(oris.shank(side));
        let m = shank.matrix();
        let (rx, ry, rz) = (
            m.column(0).into_owned(),
            m.column(1).into_owned(),
            m.column(2).into_owned(),
        );
        // Constant part of the thigh vector: τ = (p_mp − p_a) + offset.
        let offset = pelvis_y * (side.sign() * 0.5 * dims.pelvis_width) - rz * dims.shank(side);
        let tau = thigh_vector(state, &oris.pelvis, oris.shank(side), dims, side);
        let norm = tau.norm();
        if norm < 1e-6 {
            return Err(Error::DegenerateGeometry(format!(
                "{} thigh vector has zero length",
                side.name()
            )));
        }
        let unit = tau / norm;

        let length_row = pelvis_ankle_row(&unit, side);
        let c = norm - dims.thigh(side);
        let d = -c + (length_row * state.x)[0];
        rows.push(ConstraintRow { side, kind: ConstraintKind::ThighLength, d_row: length_row, d });

        rows.push(ConstraintRow {
            side,
            kind: ConstraintKind::Hinge,
            d_row: pelvis_ankle_row(&ry, side),
            d: -offset.dot(&ry),
        });

        let alpha = knee_angle(&unit, &shank)?;
        let upper = knee_max.get(side).min(std::f64::consts::PI);
        if alpha < 0.0 || alpha > upper {
            let clamped = alpha.clamp(KNEE_MARGIN, (upper - KNEE_MARGIN).max(KNEE_MARGIN));
            let phase = clamped - std::f64::consts::FRAC_PI_2;
            let psi = rz * phase.cos() - rx * phase.sin();
            rows.push(ConstraintRow {
                side,
                kind: ConstraintKind::KneeRange,
                d_row: pelvis_ankle_row(&psi, side),
                d: -offset.dot(&psi),
            });
        }
    }
    Ok(ConstraintSystem { rows })
}
