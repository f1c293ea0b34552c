//! Raw sensor streams to filter inputs.

use serde::{Deserialize, Serialize};

use crate::body::{InstrumentedOrientations, Side};
use crate::error::{Error, Result};
use crate::so3::{quat_from_axis_angle, quat_inverse, quat_multiply, rotate_vector, Quat, Vec3};

pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, 0.0, 9.81];

/// One sample from one IMU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawImuSample {
    pub timestamp: f64,
    /// Specific force in the sensor frame, m/s².
    pub accel: Vec3,
    /// Angular rate, rad/s. Carried through, not used by the filter.
    pub gyro: Vec3,
    /// World from sensor.
    pub sensor_orientation: Quat,
}

/// Floor contact flags for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Contact {
    pub left: bool,
    pub right: bool,
}

impl Contact {
    pub fn get(&self, side: Side) -> bool {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    pub fn set(&mut self, side: Side, v: bool) {
        match side {
            Side::Left => self.left = v,
            Side::Right => self.right = v,
        }
    }
}

/// Filter input for one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuFrame {
    pub timestamp: f64,
    /// Inertial acceleration in the world frame: mid-pelvis, left ankle, right ankle.
    pub accel_world: [Vec3; 3],
    pub orientations: InstrumentedOrientations,
    pub contact: Contact,
}

/// Inclusive sample-index intervals of floor contact, per side.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepEvents {
    pub left: Vec<(usize, usize)>,
    pub right: Vec<(usize, usize)>,
}

impl StepEvents {
    pub fn side(&self, side: Side) -> &[(usize, usize)] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Vec<(usize, usize)> {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }

    /// Per-frame contact flags for a series of length `n`.
    pub fn contact_flags(&self, n: usize) -> Vec<Contact> {
        let mut out = vec![Contact::default(); n];
        for side in Side::BOTH {
            for &(start, end) in self.side(side) {
                for c in out.iter_mut().take(end.saturating_add(1).min(n)).skip(start) {
                    c.set(side, true);
                }
            }
        }
        out
    }

    /// Sorted, disjoint and within `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        for side in Side::BOTH {
            let mut prev_end: Option<usize> = None;
            for &(start, end) in self.side(side) {
                if start > end || end >= n {
                    return Err(Error::InvalidParameter(format!(
                        "{} step interval [{start}, {end}] invalid for {n} frames",
                        side.name()
                    )));
                }
                if prev_end.is_some_and(|p| start <= p) {
                    return Err(Error::InvalidParameter(format!(
                        "{} step intervals overlap or are unsorted at [{start}, {end}]",
                        side.name()
                    )));
                }
                prev_end = Some(end);
            }
        }
        Ok(())
    }
}

/// World from segment, given the constant segment-to-sensor offset.
pub fn segment_orientation(sensor_q: &Quat, offset: &Quat) -> Quat {
    quat_multiply(sensor_q, &quat_inverse(offset))
}

/// Offset such that `segment_orientation(sensor_q_at_pose, offset)` equals the reference.
pub fn calibrate_offset(reference_body_q: &Quat, sensor_q_at_pose: &Quat) -> Quat {
    quat_multiply(&quat_inverse(reference_body_q), sensor_q_at_pose)
}

pub fn world_inertial_accel(sensor_q: &Quat, raw_accel: &Vec3, gravity: &Vec3) -> Vec3 {
    rotate_vector(sensor_q, raw_accel) - gravity
}

/// Stance detection by low acceleration variance.
///
/// Every full window of `round(window·fs)` samples whose summed per-axis
/// population variance falls below `threshold` marks all its samples as in
/// contact. A series shorter than the window yields no events.
pub fn detect_steps(accel_world: &[Vec3], sample_rate: f64, window: f64, threshold: f64) -> Vec<(usize, usize)> {
    let w = (window * sample_rate).round() as usize;
    let n = accel_world.len();
    if w < 2 || n < w {
        return Vec::new();
    }
    let mut flags = vec![false; n];
    // Running sums over the window.
    let mut sum = Vec3::zeros();
    let mut sum_sq = Vec3::zeros();
    for a in &accel_world[..w] {
        sum += a;
        sum_sq += a.component_mul(a);
    }
    let wf = w as f64;
    for start in 0..=n - w {
        if start > 0 {
            let out = accel_world[start - 1];
            let inc = accel_world[start + w - 1];
            sum += inc - out;
            sum_sq += inc.component_mul(&inc) - out.component_mul(&out);
        }
        let mean = sum / wf;
        let var = (sum_sq / wf - mean.component_mul(&mean)).map(|v| v.max(0.0)).sum();
        if var < threshold {
            flags[start..start + w].iter_mut().for_each(|f| *f = true);
        }
    }
    flags_to_intervals(&flags)
}

pub fn flags_to_intervals(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, flags.len() - 1));
    }
    out
}

/// Stance intervals for both ankles from world-frame ankle accelerations.
pub fn detect_step_events(frames: &[ImuFrame], sample_rate: f64, window: f64, threshold: f64) -> StepEvents {
    let series = |k: usize| frames.iter().map(|f| f.accel_world[k]).collect::<Vec<_>>();
    StepEvents {
        left: detect_steps(&series(1), sample_rate, window, threshold),
        right: detect_steps(&series(2), sample_rate, window, threshold),
    }
}

/// Combined x/y RMSE between `reference` and `imu` rotated by `yaw` about z.
pub fn yaw_cost(reference: &[Vec3], imu: &[Vec3], yaw: f64) -> f64 {
    let q = quat_from_axis_angle(&Vec3::z(), yaw);
    let mut acc = 0.0;
    for (r, a) in reference.iter().zip(imu) {
        let d = r - rotate_vector(&q, a);
        acc += d.x * d.x + d.y * d.y;
    }
    (acc / (2.0 * reference.len() as f64)).sqrt()
}

/// Yaw to apply to the IMU series to best match the reference, by grid search
/// over `[−π, π)`. Ties resolve to the first grid point.
pub fn yaw_offset_search(reference: &[Vec3], imu: &[Vec3], grid_step: f64) -> Result<f64> {
    if reference.len() != imu.len() {
        return Err(Error::LengthMismatch { left: reference.len(), right: imu.len() });
    }
    if reference.is_empty() {
        return Err(Error::EmptySeries);
    }
    if !(grid_step.is_finite() && grid_step > 0.0) {
        return Err(Error::InvalidParameter(format!("grid_step must be positive, got {grid_step}")));
    }
    // The cost is affine in (cos ψ, sin ψ) once the cross sums are collected.
    let (mut sxx, mut sxy, mut norms) = (0.0, 0.0, 0.0);
    for (r, a) in reference.iter().zip(imu) {
        sxx += r.x * a.x + r.y * a.y;
        sxy += r.y * a.x - r.x * a.y;
        norms += r.x * r.x + r.y * r.y + a.x * a.x + a.y * a.y;
    }
    let steps = (2.0 * std::f64::consts::PI / grid_step).ceil() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..steps {
        let yaw = -std::f64::consts::PI + k as f64 * grid_step;
        if yaw >= std::f64::consts::PI {
            break;
        }
        let sse = norms - 2.0 * (yaw.cos() * sxx + yaw.sin() * sxy);
        if sse < best.0 {
            best = (sse, yaw);
        }
    }
    Ok(best.1)
}

/// Segment-to-sensor offsets for the three instrumented segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MountOffsets {
    pub pelvis: Quat,
    pub left_shank: Quat,
    pub right_shank: Quat,
}

impl MountOffsets {
    pub fn identity() -> Self {
        Self {
            pelvis: Quat::identity(),
            left_shank: Quat::identity(),
            right_shank: Quat::identity(),
        }
    }

    /// Offsets that map the sensor orientations onto a reference pose.
    pub fn calibrate(reference: &InstrumentedOrientations, sensors: &InstrumentedOrientations) -> Self {
        Self {
            pelvis: calibrate_offset(&reference.pelvis, &sensors.pelvis),
            left_shank: calibrate_offset(&reference.left_shank, &sensors.left_shank),
            right_shank: calibrate_offset(&reference.right_shank, &sensors.right_shank),
        }
    }
}

/// Synchronized raw samples of the three sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawFrame {
    pub pelvis: RawImuSample,
    pub left_shank: RawImuSample,
    pub right_shank: RawImuSample,
}

impl RawFrame {
    pub fn timestamp(&self) -> f64 {
        self.pelvis.timestamp
    }

    pub fn sensor_orientations(&self) -> InstrumentedOrientations {
        InstrumentedOrientations {
            pelvis: self.pelvis.sensor_orientation,
            left_shank: self.left_shank.sensor_orientation,
            right_shank: self.right_shank.sensor_orientation,
        }
    }
}

/// Converts raw frames to filter inputs with all contact flags cleared.
pub fn build_frames(raw: &[RawFrame], offsets: &MountOffsets, gravity: &Vec3) -> Vec<ImuFrame> {
    raw.iter()
        .map(|f| {
            let sensors = [&f.pelvis, &f.left_shank, &f.right_shank];
            let accel_world = sensors.map(|s| world_inertial_accel(&s.sensor_orientation, &s.accel, gravity));
            ImuFrame {
                timestamp: f.timestamp(),
                accel_world,
                orientations: InstrumentedOrientations {
                    pelvis: segment_orientation(&f.pelvis.sensor_orientation, &offsets.pelvis),
                    left_shank: segment_orientation(&f.left_shank.sensor_orientation, &offsets.left_shank),
                    right_shank: segment_orientation(&f.right_shank.sensor_orientation, &offsets.right_shank),
                },
                contact: Contact::default(),
            }
        })
        .collect()
}

pub fn apply_contact(frames: &mut [ImuFrame], events: &StepEvents) {
    let flags = events.contact_flags(frames.len());
    for (f, c) in frames.iter_mut().zip(flags) {
        f.contact = c;
    }
}
