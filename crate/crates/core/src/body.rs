//! Lower-body kinematic model.
//!
//! Seven points (mid-pelvis, hips, knees, ankles) and five segments (pelvis,
//! thighs, shanks). Segment frames use `x` anterior, `y` to the subject's
//! left (mediolateral, the knee hinge axis) and `z` along the long axis
//! pointing proximally.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::ckf::FilterState;
use crate::error::{Error, Result};
use crate::so3::{quat_to_rotation, rotate_vector, rotation_to_quat, Quat, Rot, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    /// +1 for left, -1 for right: the hip lies along `±r_y` of the pelvis.
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Segment lengths (joint to joint) and reference heights, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyDimensions {
    /// Hip-to-hip distance.
    pub pelvis_width: f64,
    pub left_thigh: f64,
    pub right_thigh: f64,
    pub left_shank: f64,
    pub right_shank: f64,
    /// Standing height of the mid-pelvis, used as the pelvis-height pseudo-measurement.
    pub pelvis_height: f64,
    /// Ankle-joint height while the foot is flat on the floor.
    pub floor_height: f64,
}

impl Default for BodyDimensions {
    fn default() -> Self {
        let (thigh, shank, floor) = (0.45, 0.43, 0.08);
        Self {
            pelvis_width: 0.24,
            left_thigh: thigh,
            right_thigh: thigh,
            left_shank: shank,
            right_shank: shank,
            pelvis_height: floor + thigh + shank,
            floor_height: floor,
        }
    }
}

impl BodyDimensions {
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("pelvis_width", self.pelvis_width),
            ("left_thigh", self.left_thigh),
            ("right_thigh", self.right_thigh),
            ("left_shank", self.left_shank),
            ("right_shank", self.right_shank),
        ];
        for (name, v) in lengths {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.pelvis_height.is_finite()
            && self.floor_height.is_finite()
            && self.pelvis_height > self.floor_height)
        {
            return Err(Error::InvalidParameter(format!(
                "pelvis_height ({}) must exceed floor_height ({})",
                self.pelvis_height, self.floor_height
            )));
        }
        Ok(())
    }

    pub fn thigh(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left_thigh,
            Side::Right => self.right_thigh,
        }
    }

    pub fn shank(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left_shank,
            Side::Right => self.right_shank,
        }
    }
}

/// Orientations of the three instrumented segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstrumentedOrientations {
    pub pelvis: Quat,
    pub left_shank: Quat,
    pub right_shank: Quat,
}

impl InstrumentedOrientations {
    pub fn shank(&self, side: Side) -> &Quat {
        match side {
            Side::Left => &self.left_shank,
            Side::Right => &self.right_shank,
        }
    }
}

/// Orientations of all five segments; thighs are derived, the rest measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentOrientations {
    pub pelvis: Quat,
    pub left_thigh: Quat,
    pub right_thigh: Quat,
    pub left_shank: Quat,
    pub right_shank: Quat,
}

impl SegmentOrientations {
    pub fn thigh(&self, side: Side) -> &Quat {
        match side {
            Side::Left => &self.left_thigh,
            Side::Right => &self.right_thigh,
        }
    }

    pub fn shank(&self, side: Side) -> &Quat {
        match side {
            Side::Left => &self.left_shank,
            Side::Right => &self.right_shank,
        }
    }

    pub fn instrumented(&self) -> InstrumentedOrientations {
        InstrumentedOrientations {
            pelvis: self.pelvis,
            left_shank: self.left_shank,
            right_shank: self.right_shank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Joint {
    MidPelvis,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl Joint {
    pub const ALL: [Joint; 7] = [
        Joint::MidPelvis,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftAnkle,
        Joint::RightAnkle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Joint::MidPelvis => "mid_pelvis",
            Joint::LeftHip => "left_hip",
            Joint::RightHip => "right_hip",
            Joint::LeftKnee => "left_knee",
            Joint::RightKnee => "right_knee",
            Joint::LeftAnkle => "left_ankle",
            Joint::RightAnkle => "right_ankle",
        }
    }
}

/// Joint positions and segment orientations at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSnapshot {
    pub timestamp: f64,
    pub mid_pelvis: Vec3,
    pub left_hip: Vec3,
    pub right_hip: Vec3,
    pub left_knee: Vec3,
    pub right_knee: Vec3,
    pub left_ankle: Vec3,
    pub right_ankle: Vec3,
    pub orientations: SegmentOrientations,
}

impl PoseSnapshot {
    pub fn joint(&self, joint: Joint) -> Vec3 {
        match joint {
            Joint::MidPelvis => self.mid_pelvis,
            Joint::LeftHip => self.left_hip,
            Joint::RightHip => self.right_hip,
            Joint::LeftKnee => self.left_knee,
            Joint::RightKnee => self.right_knee,
            Joint::LeftAnkle => self.left_ankle,
            Joint::RightAnkle => self.right_ankle,
        }
    }

    pub fn joint_mut(&mut self, joint: Joint) -> &mut Vec3 {
        match joint {
            Joint::MidPelvis => &mut self.mid_pelvis,
            Joint::LeftHip => &mut self.left_hip,
            Joint::RightHip => &mut self.right_hip,
            Joint::LeftKnee => &mut self.left_knee,
            Joint::RightKnee => &mut self.right_knee,
            Joint::LeftAnkle => &mut self.left_ankle,
            Joint::RightAnkle => &mut self.right_ankle,
        }
    }

    pub fn hip(&self, side: Side) -> Vec3 {
        match side {
            Side::Left => self.left_hip,
            Side::Right => self.right_hip,
        }
    }

    pub fn knee(&self, side: Side) -> Vec3 {
        match side {
            Side::Left => self.left_knee,
            Side::Right => self.right_knee,
        }
    }

    pub fn ankle(&self, side: Side) -> Vec3 {
        match side {
            Side::Left => self.left_ankle,
            Side::Right => self.right_ankle,
        }
    }

    /// Every joint shifted by `offset`; orientations untouched.
    pub fn translated(&self, offset: &Vec3) -> PoseSnapshot {
        let mut out = *self;
        for j in Joint::ALL {
            *out.joint_mut(j) += offset;
        }
        out
    }
}

pub fn hip_position(mid_pelvis: &Vec3, pelvis: &Quat, pelvis_width: f64, side: Side) -> Vec3 {
    mid_pelvis + rotate_vector(pelvis, &Vec3::y()) * (side.sign() * 0.5 * pelvis_width)
}

pub fn knee_position(ankle: &Vec3, shank: &Quat, shank_length: f64) -> Vec3 {
    ankle + rotate_vector(shank, &Vec3::z()) * shank_length
}

/// Hip minus knee for one leg, from the state's pelvis and ankle positions.
pub fn thigh_vector(
    state: &FilterState,
    pelvis: &Quat,
    shank: &Quat,
    dims: &BodyDimensions,
    side: Side,
) -> Vec3 {
    let hip = hip_position(&state.mid_pelvis(), pelvis, dims.pelvis_width, side);
    let knee = knee_position(&state.ankle(side), shank, dims.shank(side));
    hip - knee
}

/// Knee flexion from the thigh direction and the shank frame.
///
/// Zero for a straight leg, positive in flexion; wrapped into `[-π/2, 3π/2)`.
pub fn knee_angle(thigh_dir: &Vec3, shank: &Rot) -> Result<f64> {
    let m = shank.matrix();
    let along_z = -thigh_dir.dot(&m.column(2));
    let along_x = -thigh_dir.dot(&m.column(0));
    if along_z.abs() < 1e-12 && along_x.abs() < 1e-12 {
        return Err(Error::UndefinedDirection);
    }
    Ok(wrap_knee(along_z.atan2(along_x) + FRAC_PI_2))
}

fn wrap_knee(alpha: f64) -> f64 {
    if alpha >= 1.5 * PI {
        alpha - 2.0 * PI
    } else if alpha < -FRAC_PI_2 {
        alpha + 2.0 * PI
    } else {
        alpha
    }
}

/// Thigh frame sharing the shank hinge axis: columns `[r_y × τ̂, r_y, τ̂]`.
///
/// `τ̂` is re-orthogonalized against `r_y`, so the second column is the shank
/// `y` axis exactly.
pub fn thigh_orientation(thigh_dir: &Vec3, shank: &Rot) -> Result<Rot> {
    let y = shank.matrix().column(1).into_owned();
    let dir = thigh_dir.normalize();
    if dir.cross(&y).norm() < 1e-6_f64.sin() {
        return Err(Error::DegenerateGeometry(
            "thigh direction parallel to the knee hinge axis".into(),
        ));
    }
    let z = (dir - y * y.dot(&dir)).normalize();
    let x = y.cross(&z);
    Ok(Rot::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[x, y, z])))
}

/// Full pose from a filter state and the measured segment orientations.
pub fn assemble_pose(
    state: &FilterState,
    measured: &InstrumentedOrientations,
    dims: &BodyDimensions,
    timestamp: f64,
) -> Result<PoseSnapshot> {
    let mp = state.mid_pelvis();
    let left_hip = hip_position(&mp, &measured.pelvis, dims.pelvis_width, Side::Left);
    let right_hip = hip_position(&mp, &measured.pelvis, dims.pelvis_width, Side::Right);
    let left_ankle = state.ankle(Side::Left);
    let right_ankle = state.ankle(Side::Right);
    let left_knee = knee_position(&left_ankle, &measured.left_shank, dims.left_shank);
    let right_knee = knee_position(&right_ankle, &measured.right_shank, dims.right_shank);

    let thigh = |hip: Vec3, knee: Vec3, shank: &Quat| -> Result<Quat> {
        let tau = hip - knee;
        if tau.norm() < 1e-9 {
            return Err(Error::DegenerateGeometry("hip and knee coincide".into()));
        }
        let r = thigh_orientation(&tau.normalize(), &quat_to_rotation(shank))?;
        Ok(rotation_to_quat(&r))
    };
    let left_thigh = thigh(left_hip, left_knee, &measured.left_shank)?;
    let right_thigh = thigh(right_hip, right_knee, &measured.right_shank)?;

    Ok(PoseSnapshot {
        timestamp,
        mid_pelvis: mp,
        left_hip,
        right_hip,
        left_knee,
        right_knee,
        left_ankle,
        right_ankle,
        orientations: SegmentOrientations {
            pelvis: measured.pelvis,
            left_thigh,
            right_thigh,
            left_shank: measured.left_shank,
            right_shank: measured.right_shank,
        },
    })
}

/// Knee angle of a posed leg, computed from its thigh and shank orientations.
pub fn pose_knee_angle(pose: &PoseSnapshot, side: Side) -> Result<f64> {
    let thigh = quat_to_rotation(pose.orientations.thigh(side));
    let dir = thigh.matrix().column(2).into_owned();
    knee_angle(&dir, &quat_to_rotation(pose.orientations.shank(side)))
}
