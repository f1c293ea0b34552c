//! Accuracy metrics comparing an estimated trial against a reference.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Quaternion, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::body::{pose_knee_angle, Joint, PoseSnapshot, Side};
use crate::error::{Error, Result};
use crate::so3::{quat_distance, quat_inverse, quat_multiply, quat_to_rotation, Quat, Rot, Vec3};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Points averaged in the position error (the mid-pelvis is the anchor).
const POSITION_POINTS: [Joint; 6] = [
    Joint::LeftHip,
    Joint::RightHip,
    Joint::LeftKnee,
    Joint::RightKnee,
    Joint::LeftAnkle,
    Joint::RightAnkle,
];

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::EmptySeries);
    }
    Ok(())
}

/// Estimated pose shifted so its mid-pelvis coincides with the reference.
pub fn root_anchor(est: &PoseSnapshot, reference: &PoseSnapshot) -> PoseSnapshot {
    est.translated(&(reference.mid_pelvis - est.mid_pelvis))
}

/// RMS over frames of the mean joint-position error of hips, knees and
/// ankles, after root anchoring. Meters.
pub fn position_rmse(est: &[PoseSnapshot], reference: &[PoseSnapshot]) -> Result<f64> {
    check_lengths(est.len(), reference.len())?;
    let mut acc = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let anchored = root_anchor(e, r);
        let mean = POSITION_POINTS
            .iter()
            .map(|j| (anchored.joint(*j) - r.joint(*j)).norm())
            .sum::<f64>()
            / POSITION_POINTS.len() as f64;
        acc += mean * mean;
    }
    Ok((acc / est.len() as f64).sqrt())
}

/// Rotation angle of `a ⊗ b⁻¹`, radians.
pub fn rotation_offset_angle(a: &Quat, b: &Quat) -> f64 {
    quat_distance(a, b)
}

/// Mean rotation minimizing the summed squared chordal distance, from the
/// dominant eigenvector of `Σ q qᵀ`. Sign-invariant in its inputs.
pub fn chordal_mean(quats: &[Quat]) -> Result<Quat> {
    if quats.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut m = Matrix4::<f64>::zeros();
    for q in quats {
        let v = Vector4::new(q.w, q.i, q.j, q.k);
        m += v * v.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let (best, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    let v = eig.eigenvectors.column(best);
    let q = Quaternion::new(v[0], v[1], v[2], v[3]);
    Ok(Quat::from_quaternion(if q.w < 0.0 { -q } else { q }))
}

/// RMS over frames of the thigh orientation error averaged over both sides.
///
/// With `remove_bias`, the per-side mean offset `q_ref ⊗ q_est⁻¹` over the
/// trial is removed first, so a constant misalignment costs nothing.
pub fn orientation_rmse(est: &[PoseSnapshot], reference: &[PoseSnapshot], remove_bias: bool) -> Result<f64> {
    check_lengths(est.len(), reference.len())?;
    let mut per_side = Vec::with_capacity(2);
    for side in Side::BOTH {
        let offsets: Vec<Quat> = est
            .iter()
            .zip(reference)
            .map(|(e, r)| quat_multiply(r.orientations.thigh(side), &quat_inverse(e.orientations.thigh(side))))
            .collect();
        let bias = if remove_bias { chordal_mean(&offsets)? } else { Quat::identity() };
        let angles: Vec<f64> = offsets
            .iter()
            .map(|o| rotation_offset_angle(o, &bias))
            .collect();
        per_side.push(angles);
    }
    let acc: f64 = per_side[0]
        .iter()
        .zip(&per_side[1])
        .map(|(l, r)| {
            let m = 0.5 * (l + r);
            m * m
        })
        .sum();
    Ok((acc / est.len() as f64).sqrt())
}

/// Axis order of an intrinsic Tait-Bryan decomposition `R = R_i(a) R_j(b) R_k(c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EulerSequence {
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    #[default]
    Zxy,
    Zyx,
}

impl EulerSequence {
    pub fn axes(self) -> [usize; 3] {
        match self {
            EulerSequence::Xyz => [0, 1, 2],
            EulerSequence::Xzy => [0, 2, 1],
            EulerSequence::Yxz => [1, 0, 2],
            EulerSequence::Yzx => [1, 2, 0],
            EulerSequence::Zxy => [2, 0, 1],
            EulerSequence::Zyx => [2, 1, 0],
        }
    }
}

/// Angles `[a, b, c]` of `R = R_i(a) R_j(b) R_k(c)`, with `b ∈ [−π/2, π/2]`.
pub fn euler_angles(r: &Rot, seq: EulerSequence) -> [f64; 3] {
    let [i, j, k] = seq.axes();
    let m = r.matrix();
    let cyclic = (j + 3 - i) % 3 == 1;
    let e = if cyclic { 1.0 } else { -1.0 };
    let b = (e * m[(i, k)]).clamp(-1.0, 1.0).asin();
    let a = (-e * m[(j, k)]).atan2(m[(k, k)]);
    let c = (-e * m[(i, j)]).atan2(m[(i, i)]);
    [a, b, c]
}

/// Hip angles of a thigh relative to the pelvis, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HipAngles {
    /// Flexion positive.
    pub sagittal: f64,
    pub frontal: f64,
    pub transverse: f64,
}

pub fn hip_angles(pelvis: &Quat, thigh: &Quat, seq: EulerSequence) -> HipAngles {
    let rel = quat_to_rotation(&quat_multiply(&quat_inverse(pelvis), thigh));
    let angles = euler_angles(&rel, seq);
    let mut by_axis = [0.0; 3];
    for (axis, v) in seq.axes().iter().zip(angles) {
        by_axis[*axis] = v;
    }
    HipAngles { sagittal: -by_axis[1], frontal: by_axis[0], transverse: by_axis[2] }
}

/// Per-frame joint angles of both legs, radians.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointAngleSeries {
    pub knee: [Vec<f64>; 2],
    pub hip_sagittal: [Vec<f64>; 2],
    pub hip_frontal: [Vec<f64>; 2],
    pub hip_transverse: [Vec<f64>; 2],
}

impl JointAngleSeries {
    /// `(name, left, right)` for each angle.
    pub fn named(&self) -> [(&'static str, &[Vec<f64>; 2]); 4] {
        [
            ("knee_sagittal", &self.knee),
            ("hip_sagittal", &self.hip_sagittal),
            ("hip_frontal", &self.hip_frontal),
            ("hip_transverse", &self.hip_transverse),
        ]
    }
}

pub fn joint_angle_series(poses: &[PoseSnapshot], seq: EulerSequence) -> Result<JointAngleSeries> {
    let mut out = JointAngleSeries::default();
    for pose in poses {
        for (k, side) in Side::BOTH.into_iter().enumerate() {
            out.knee[k].push(pose_knee_angle(pose, side)?);
            let h = hip_angles(&pose.orientations.pelvis, pose.orientations.thigh(side), seq);
            out.hip_sagittal[k].push(h.sagittal);
            out.hip_frontal[k].push(h.frontal);
            out.hip_transverse[k].push(h.transverse);
        }
    }
    Ok(out)
}

/// Pearson correlation coefficient.
pub fn correlation_coefficient(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation);
    }
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let cov = n * sab - sa * sb;
    let va = n * saa - sa * sa;
    let vb = n * sbb - sb * sb;
    if !(va > 0.0 && vb > 0.0) {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Root mean square difference, optionally after removing the mean difference.
pub fn rmse(a: &[f64], b: &[f64], remove_bias: bool) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let n = a.len() as f64;
    let bias = if remove_bias { a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / n } else { 0.0 };
    Ok((a.iter().zip(b).map(|(x, y)| (x - y - bias).powi(2)).sum::<f64>() / n).sqrt())
}

/// Sum of horizontal distances between consecutive event samples.
pub fn travelled_distance(points: &[Vec3], events: &[usize]) -> Result<f64> {
    if let Some(bad) = events.iter().find(|&&e| e >= points.len()) {
        return Err(Error::InvalidParameter(format!(
            "event index {bad} beyond {} samples",
            points.len()
        )));
    }
    Ok(events
        .windows(2)
        .map(|w| {
            let d = points[w[1]] - points[w[0]];
            d.x.hypot(d.y)
        })
        .sum())
}

/// Relative travelled-distance error for the pelvis and left ankle (left
/// stance onsets) and the right ankle (right stance onsets).
pub fn ttd_deviation(
    est: &[PoseSnapshot],
    reference: &[PoseSnapshot],
    left_events: &[usize],
    right_events: &[usize],
) -> Result<TtdDeviation> {
    check_lengths(est.len(), reference.len())?;
    let one = |joint: Joint, events: &[usize]| -> Result<f64> {
        let e: Vec<Vec3> = est.iter().map(|p| p.joint(joint)).collect();
        let r: Vec<Vec3> = reference.iter().map(|p| p.joint(joint)).collect();
        let ref_d = travelled_distance(&r, events)?;
        if ref_d == 0.0 {
            return Err(Error::ZeroReferenceDistance);
        }
        Ok((travelled_distance(&e, events)? - ref_d).abs() / ref_d)
    };
    Ok(TtdDeviation {
        pelvis: one(Joint::MidPelvis, left_events)?,
        left_ankle: one(Joint::LeftAnkle, left_events)?,
        right_ankle: one(Joint::RightAnkle, right_events)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtdDeviation {
    pub pelvis: f64,
    pub left_ankle: f64,
    pub right_ankle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleMetrics {
    /// Degrees.
    pub rmse: f64,
    /// Degrees, after removing the mean difference.
    pub rmse_unbiased: f64,
    /// Absent when either series is constant.
    pub cc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideAngleMetrics {
    pub left: AngleMetrics,
    pub right: AngleMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    pub remove_bias: bool,
    pub euler_sequence: EulerSequence,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { remove_bias: true, euler_sequence: EulerSequence::Zxy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    pub frames: usize,
    /// Meters.
    pub e_pos: f64,
    /// Degrees.
    pub e_ori_biased: f64,
    /// Degrees.
    pub e_ori_unbiased: f64,
    pub knee_sagittal: SideAngleMetrics,
    pub hip_sagittal: SideAngleMetrics,
    pub hip_frontal: SideAngleMetrics,
    pub hip_transverse: SideAngleMetrics,
    /// Absent when the reference travels no distance between events.
    pub ttd_deviation: Option<TtdDeviation>,
}

fn angle_metrics(est: &[f64], reference: &[f64]) -> Result<AngleMetrics> {
    let cc = match correlation_coefficient(est, reference) {
        Ok(v) => Some(v),
        Err(Error::UndefinedCorrelation) => None,
        Err(e) => return Err(e),
    };
    Ok(AngleMetrics {
        rmse: rmse(est, reference, false)?.to_degrees(),
        rmse_unbiased: rmse(est, reference, true)?.to_degrees(),
        cc,
    })
}

/// Full report; step events are stance-onset sample indices per side.
pub fn evaluate(
    est: &[PoseSnapshot],
    reference: &[PoseSnapshot],
    left_events: &[usize],
    right_events: &[usize],
    opts: &MetricOptions,
) -> Result<MetricReport> {
    check_lengths(est.len(), reference.len())?;
    let ae = joint_angle_series(est, opts.euler_sequence)?;
    let ar = joint_angle_series(reference, opts.euler_sequence)?;
    let pair = |e: &[Vec<f64>; 2], r: &[Vec<f64>; 2]| -> Result<SideAngleMetrics> {
        Ok(SideAngleMetrics { left: angle_metrics(&e[0], &r[0])?, right: angle_metrics(&e[1], &r[1])? })
    };
    let ttd = match ttd_deviation(est, reference, left_events, right_events) {
        Ok(v) => Some(v),
        Err(Error::ZeroReferenceDistance) => None,
        Err(e) => return Err(e),
    };
    let biased = orientation_rmse(est, reference, false)?;
    let unbiased = if opts.remove_bias { orientation_rmse(est, reference, true)? } else { biased };
    Ok(MetricReport {
        format_version: REPORT_FORMAT_VERSION,
        frames: est.len(),
        e_pos: position_rmse(est, reference)?,
        e_ori_biased: biased.to_degrees(),
        e_ori_unbiased: unbiased.to_degrees(),
        knee_sagittal: pair(&ae.knee, &ar.knee)?,
        hip_sagittal: pair(&ae.hip_sagittal, &ar.hip_sagittal)?,
        hip_frontal: pair(&ae.hip_frontal, &ar.hip_frontal)?,
        hip_transverse: pair(&ae.hip_transverse, &ar.hip_transverse)?,
        ttd_deviation: ttd,
    })
}

/// Wraps an angle difference into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}
