use nalgebra::{SMatrix, SVector};

use crate::body::Side;
use crate::so3::Vec3;

pub const STATE_DIM: usize = 18;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type Covariance = SMatrix<f64, STATE_DIM, STATE_DIM>;
/// Stacked world-frame inertial accelerations `[a_mp, a_la, a_ra]`.
pub type InputVector = SVector<f64, 9>;

// Offsets of each 3-vector block inside the state.
pub const POS_MID_PELVIS: usize = 0;
pub const POS_LEFT_ANKLE: usize = 3;
pub const POS_RIGHT_ANKLE: usize = 6;
pub const VEL_MID_PELVIS: usize = 9;
pub const VEL_LEFT_ANKLE: usize = 12;
pub const VEL_RIGHT_ANKLE: usize = 15;

pub fn ankle_pos_offset(side: Side) -> usize {
    match side {
        Side::Left => POS_LEFT_ANKLE,
        Side::Right => POS_RIGHT_ANKLE,
    }
}

pub fn ankle_vel_offset(side: Side) -> usize {
    match side {
        Side::Left => VEL_LEFT_ANKLE,
        Side::Right => VEL_RIGHT_ANKLE,
    }
}

/// Positions and velocities of the mid-pelvis and both ankles, with error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: StateVector,
    pub p: Covariance,
}

impl FilterState {
    pub fn zeros() -> Self {
        Self {
            x: StateVector::zeros(),
            p: Covariance::zeros(),
        }
    }

    pub fn new(x: StateVector, p: Covariance) -> Self {
        Self { x, p }
    }

    fn block(&self, at: usize) -> Vec3 {
        self.x.fixed_rows::<3>(at).into_owned()
    }

    fn set_block(&mut self, at: usize, v: &Vec3) {
        self.x.fixed_rows_mut::<3>(at).copy_from(v);
    }

    pub fn mid_pelvis(&self) -> Vec3 {
        self.block(POS_MID_PELVIS)
    }

    pub fn ankle(&self, side: Side) -> Vec3 {
        self.block(ankle_pos_offset(side))
    }

    pub fn mid_pelvis_velocity(&self) -> Vec3 {
        self.block(VEL_MID_PELVIS)
    }

    pub fn ankle_velocity(&self, side: Side) -> Vec3 {
        self.block(ankle_vel_offset(side))
    }

    pub fn set_mid_pelvis(&mut self, v: &Vec3) {
        self.set_block(POS_MID_PELVIS, v);
    }

    pub fn set_ankle(&mut self, side: Side, v: &Vec3) {
        self.set_block(ankle_pos_offset(side), v);
    }

    pub fn set_mid_pelvis_velocity(&mut self, v: &Vec3) {
        self.set_block(VEL_MID_PELVIS, v);
    }

    pub fn set_ankle_velocity(&mut self, side: Side, v: &Vec3) {
        self.set_block(ankle_vel_offset(side), v);
    }

    /// Stacks positions and velocities into a state vector.
    pub fn stack(
        mid_pelvis: &Vec3,
        left_ankle: &Vec3,
        right_ankle: &Vec3,
        v_mid_pelvis: &Vec3,
        v_left_ankle: &Vec3,
        v_right_ankle: &Vec3,
    ) -> StateVector {
        let mut s = FilterState::zeros();
        s.set_mid_pelvis(mid_pelvis);
        s.set_ankle(Side::Left, left_ankle);
        s.set_ankle(Side::Right, right_ankle);
        s.set_mid_pelvis_velocity(v_mid_pelvis);
        s.set_ankle_velocity(Side::Left, v_left_ankle);
        s.set_ankle_velocity(Side::Right, v_right_ankle);
        s.x
    }
}

pub(crate) fn symmetrize(p: &mut Covariance) {
    let t = p.transpose();
    *p = (*p + t) * 0.5;
}
