//! Synthetic gait: ground-truth lower-body trajectories that satisfy the
//! filter's kinematic model exactly, and the IMU data they would produce.
//!
//! The pelvis travels at constant speed along a planar path with a yaw-only
//! orientation and a sinusoidal height that peaks at mid-stance. Each foot is
//! either planted on a footprint or swinging between consecutive footprints
//! on a minimum-jerk profile, so positions are C² and the accelerations below
//! are exact derivatives. Knees follow from two-link inverse kinematics in the
//! plane containing the hip-ankle line and the pelvis forward axis, which makes
//! the hinge constraint hold by construction. Synthetic sensors sit at the
//! mid-pelvis and at the ankle joints.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::{
    hip_position, thigh_orientation, BodyDimensions, InstrumentedOrientations, PoseSnapshot, SegmentOrientations,
    Side,
};
use crate::ckf::{FilterState, StateVector};
use crate::error::{Error, Result};
use crate::metrics::travelled_distance;
use crate::preprocess::{flags_to_intervals, Contact, ImuFrame, MountOffsets, RawFrame, RawImuSample, StepEvents};
use crate::so3::{quat_from_axis_angle, quat_multiply, rotate_vector, rotation_to_quat, so3_exp, Quat, Rot, Vec3};

/// Heading amplitude of the figure-eight. At the first zero of J0 the path
/// closes after one heading period.
const FIGURE_EIGHT_AMPLITUDE: f64 = 2.404_825_557_695_773;
const FIGURE_EIGHT_PERIOD: f64 = 16.0;
const ZIGZAG_AMPLITUDE: f64 = 30.0 * PI / 180.0;
const ZIGZAG_PERIOD: f64 = 8.0;
/// Path table spacing, meters of arc length.
const TABLE_STEP: f64 = 0.25;
const GAUSS_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Straight,
    FigureEight,
    Zigzag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitParams {
    /// Steps per second; zero gives a static standing trial.
    pub cadence: f64,
    /// Distance between consecutive footprints of the same foot, meters.
    pub stride_length: f64,
    pub stance_fraction: f64,
    /// Knee flexion at mid-swing, radians.
    pub peak_knee_flexion: f64,
    /// Knee flexion at heel strike and mid-stance, radians.
    pub stance_knee_flexion: f64,
    pub path: PathKind,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub sample_rate: f64,
    pub dims: BodyDimensions,
    pub rng_seed: u64,
    /// Segment-to-sensor mounting rotations (axis-angle vectors) for pelvis,
    /// left shank and right shank.
    pub sensor_mounts: [[f64; 3]; 3],
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            cadence: 1.1,
            stride_length: 1.2,
            stance_fraction: 0.6,
            peak_knee_flexion: 60f64.to_radians(),
            stance_knee_flexion: 25f64.to_radians(),
            path: PathKind::Straight,
            duration: 30.0,
            sample_rate: 100.0,
            dims: BodyDimensions::default(),
            rng_seed: 0,
            sensor_mounts: [[0.1, -0.2, 0.3], [0.0, 0.0, 1.2], [0.0, 0.0, -1.2]],
        }
    }
}

impl GaitParams {
    pub fn is_static(&self) -> bool {
        self.cadence == 0.0 || self.stride_length == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.cadence.is_finite() && self.cadence >= 0.0) {
            return bad(format!("cadence must be non-negative, got {}", self.cadence));
        }
        if !(self.stride_length.is_finite() && self.stride_length >= 0.0) {
            return bad(format!("stride_length must be non-negative, got {}", self.stride_length));
        }
        if !(self.stance_fraction > 0.0 && self.stance_fraction < 1.0) {
            return bad(format!("stance_fraction must lie in (0, 1), got {}", self.stance_fraction));
        }
        if !(self.peak_knee_flexion > 0.0 && self.peak_knee_flexion < PI) {
            return bad(format!("peak_knee_flexion must lie in (0, π), got {}", self.peak_knee_flexion));
        }
        if !(self.stance_knee_flexion >= 0.0 && self.stance_knee_flexion < self.peak_knee_flexion) {
            return bad("stance_knee_flexion must lie in [0, peak_knee_flexion)".into());
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if self.sensor_mounts.iter().flatten().any(|v| !v.is_finite()) {
            return bad("sensor_mounts must be finite".into());
        }
        Ok(())
    }

    pub fn mount_offsets(&self) -> MountOffsets {
        let q = |v: &[f64; 3]| rotation_to_quat(&so3_exp(&Vec3::from(*v)));
        MountOffsets {
            pelvis: q(&self.sensor_mounts[0]),
            left_shank: q(&self.sensor_mounts[1]),
            right_shank: q(&self.sensor_mounts[2]),
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

/// Everything the generator knows about a trial.
#[derive(Debug, Clone)]
pub struct GroundTruthTrial {
    pub params: GaitParams,
    /// Body dimensions with `pelvis_height` set to the mean pelvis height.
    pub dims: BodyDimensions,
    pub poses: Vec<PoseSnapshot>,
    /// Noiseless filter inputs with true contact flags.
    pub frames: Vec<ImuFrame>,
    pub raw: Vec<RawFrame>,
    pub mounts: MountOffsets,
    pub events: StepEvents,
    /// True velocities of mid-pelvis, left ankle, right ankle.
    pub velocities: Vec<[Vec3; 3]>,
    pub initial_state: StateVector,
    /// Travelled distance at stance onsets: pelvis and left ankle at left
    /// onsets, right ankle at right onsets.
    pub travelled_distance: [f64; 3],
}

impl GroundTruthTrial {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Planar path parameterized by arc length.
struct Path {
    kind: PathKind,
    table: Vec<[f64; 2]>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Path {
    fn new(kind: PathKind, max_s: f64) -> Self {
        let (nodes, weights) = gauss_legendre(GAUSS_POINTS);
        let mut path = Path { kind, table: vec![[0.0, 0.0]], nodes, weights };
        if kind != PathKind::Straight {
            let n = (max_s / TABLE_STEP).ceil() as usize + 1;
            for k in 0..n {
                let a = k as f64 * TABLE_STEP;
                let d = path.integrate(a, a + TABLE_STEP);
                let last = path.table[k];
                path.table.push([last[0] + d[0], last[1] + d[1]]);
            }
        }
        path
    }

    fn heading(&self, s: f64) -> f64 {
        match self.kind {
            PathKind::Straight => 0.0,
            PathKind::FigureEight => FIGURE_EIGHT_AMPLITUDE * (2.0 * PI * s / FIGURE_EIGHT_PERIOD).sin(),
            PathKind::Zigzag => ZIGZAG_AMPLITUDE * (2.0 * PI * s / ZIGZAG_PERIOD).sin(),
        }
    }

    /// dψ/ds.
    fn curvature(&self, s: f64) -> f64 {
        match self.kind {
            PathKind::Straight => 0.0,
            PathKind::FigureEight => {
                let w = 2.0 * PI / FIGURE_EIGHT_PERIOD;
                FIGURE_EIGHT_AMPLITUDE * w * (w * s).cos()
            }
            PathKind::Zigzag => {
                let w = 2.0 * PI / ZIGZAG_PERIOD;
                ZIGZAG_AMPLITUDE * w * (w * s).cos()
            }
        }
    }

    fn integrate(&self, a: f64, b: f64) -> [f64; 2] {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let mut out = [0.0, 0.0];
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let psi = self.heading(mid + half * x);
            out[0] += w * psi.cos();
            out[1] += w * psi.sin();
        }
        [out[0] * half, out[1] * half]
    }

    fn xy(&self, s: f64) -> [f64; 2] {
        if self.kind == PathKind::Straight {
            return [s, 0.0];
        }
        let k = ((s / TABLE_STEP).floor().max(0.0) as usize).min(self.table.len() - 1);
        let base = self.table[k];
        let d = self.integrate(k as f64 * TABLE_STEP, s);
        [base[0] + d[0], base[1] + d[1]]
    }
}

fn heading_axes(psi: f64) -> (Vec3, Vec3) {
    (Vec3::new(psi.cos(), psi.sin(), 0.0), Vec3::new(-psi.sin(), psi.cos(), 0.0))
}

/// Hip-to-ankle distance of a leg with the given knee flexion.
fn leg_span(thigh: f64, shank: f64, flexion: f64) -> f64 {
    (thigh * thigh + shank * shank + 2.0 * thigh * shank * flexion.cos()).sqrt()
}

#[derive(Debug, Clone, Copy)]
struct Kinematic {
    p: Vec3,
    v: Vec3,
    a: Vec3,
}

struct Gait<'a> {
    params: &'a GaitParams,
    path: Path,
    period: f64,
    speed: f64,
    swing: f64,
    z_mean: f64,
    z_amp: f64,
    lift: [f64; 2],
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

impl<'a> Gait<'a> {
    fn new(params: &'a GaitParams) -> Result<Self> {
        let dims = &params.dims;
        let period = 2.0 / params.cadence;
        let speed = params.stride_length / period;
        let sf = params.stance_fraction;
        let max_t = period * 3.0 + params.duration;
        let path = Path::new(params.path, speed * max_t);

        // Pelvis height: the leg spans the same distance at heel strike and
        // mid-stance, where the foot is half a stance length behind the hip.
        let stance_span = Side::BOTH
            .iter()
            .map(|s| leg_span(dims.thigh(*s), dims.shank(*s), params.stance_knee_flexion))
            .fold(f64::INFINITY, f64::min);
        let reach = 0.5 * sf * params.stride_length;
        if reach >= stance_span {
            return Err(Error::InfeasibleGait(format!(
                "stride {} m too long for leg span {stance_span:.3} m",
                params.stride_length
            )));
        }
        let h_mid = stance_span;
        let h_strike = (stance_span * stance_span - reach * reach).sqrt();
        let z_amp = (h_mid - h_strike) / (1.0 - (2.0 * PI * sf).cos());
        let z_peak = dims.floor_height + h_mid;
        let z_mean = z_peak - z_amp;

        let mut lift = [0.0; 2];
        for side in Side::BOTH {
            let span = leg_span(dims.thigh(side), dims.shank(side), params.peak_knee_flexion);
            let h = z_peak - dims.floor_height - span;
            if h <= 1e-3 {
                return Err(Error::InfeasibleGait(format!(
                    "peak knee flexion {:.1}° leaves no foot clearance",
                    params.peak_knee_flexion.to_degrees()
                )));
            }
            lift[side_index(side)] = h;
        }
        Ok(Self {
            params,
            path,
            period,
            speed,
            swing: (1.0 - sf) * period,
            z_mean,
            z_amp,
            lift,
        })
    }

    fn onset_offset(&self, side: Side) -> f64 {
        match side {
            Side::Left => 0.0,
            Side::Right => 0.5 * self.period,
        }
    }

    fn pelvis(&self, t: f64) -> (Kinematic, f64) {
        let s = self.speed * t;
        let psi = self.path.heading(s);
        let kappa = self.path.curvature(s);
        let (fwd, lat) = heading_axes(psi);
        let xy = self.path.xy(s);
        let w = 4.0 * PI / self.period;
        let phase = w * (t - 0.5 * self.params.stance_fraction * self.period);
        let p = Vec3::new(xy[0], xy[1], self.z_mean + self.z_amp * phase.cos());
        let v = fwd * self.speed + Vec3::z() * (-self.z_amp * w * phase.sin());
        let a = lat * (self.speed * self.speed * kappa) + Vec3::z() * (-self.z_amp * w * w * phase.cos());
        (Kinematic { p, v, a }, psi)
    }

    fn footprint(&self, side: Side, k: i64) -> Vec3 {
        let onset = k as f64 * self.period + self.onset_offset(side);
        let s = self.speed * (onset + 0.5 * self.params.stance_fraction * self.period);
        let xy = self.path.xy(s);
        let (_, lat) = heading_axes(self.path.heading(s));
        let p = Vec3::new(xy[0], xy[1], self.params.dims.floor_height);
        p + lat * (side.sign() * 0.5 * self.params.dims.pelvis_width)
    }

    fn ankle(&self, side: Side, t: f64) -> (Kinematic, bool) {
        let local = t - self.onset_offset(side);
        let k = (local / self.period).floor();
        let within = local - k * self.period;
        let k = k as i64;
        let stance = self.params.stance_fraction * self.period;
        let start = self.footprint(side, k);
        if within < stance {
            let zero = Vec3::zeros();
            return (Kinematic { p: start, v: zero, a: zero }, true);
        }
        let end = self.footprint(side, k + 1);
        let tau = (within - stance) / self.swing;
        let (m, dm, ddm) = min_jerk(tau);
        let (g, dg, ddg) = lift_profile(tau);
        let h = self.lift[side_index(side)];
        let step = end - start;
        let (sw, sw2) = (self.swing, self.swing * self.swing);
        let p = start + step * m + Vec3::z() * (h * g);
        let v = step * (dm / sw) + Vec3::z() * (h * dg / sw);
        let a = step * (ddm / sw2) + Vec3::z() * (h * ddg / sw2);
        (Kinematic { p, v, a }, false)
    }
}

/// `10τ³ − 15τ⁴ + 6τ⁵` and its first two derivatives.
fn min_jerk(t: f64) -> (f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        t3 * (10.0 - 15.0 * t + 6.0 * t2),
        30.0 * t2 * (1.0 - 2.0 * t + t2),
        60.0 * t * (1.0 - 3.0 * t + 2.0 * t2),
    )
}

/// `64 τ³(1 − τ)³` (unit peak at τ = ½) and its first two derivatives.
fn lift_profile(t: f64) -> (f64, f64, f64) {
    let u = 1.0 - t;
    (
        64.0 * t.powi(3) * u.powi(3),
        64.0 * 3.0 * t * t * u * u * (1.0 - 2.0 * t),
        64.0 * 6.0 * t * u * (1.0 - 5.0 * t + 5.0 * t * t),
    )
}

/// Knee position and shank frame from hip, ankle and the pelvis forward axis.
fn leg_ik(hip: &Vec3, ankle: &Vec3, forward: &Vec3, thigh: f64, shank: f64) -> Result<(Vec3, Rot)> {
    let span = hip - ankle;
    let d = span.norm();
    if d >= thigh + shank || d <= (thigh - shank).abs() {
        return Err(Error::InfeasibleGait(format!(
            "hip-ankle distance {d:.4} m outside reachable range"
        )));
    }
    let u = span / d;
    let n = forward - u * u.dot(forward);
    let n_norm = n.norm();
    if n_norm < 1e-9 {
        return Err(Error::InfeasibleGait("leg aligned with the walking direction".into()));
    }
    let n = n / n_norm;
    let b = (shank * shank - thigh * thigh + d * d) / (2.0 * d);
    let c = (shank * shank - b * b).max(0.0).sqrt();
    let knee = ankle + u * b + n * c;
    let rz = (knee - ankle) / shank;
    let ry = u.cross(&n);
    let rx = ry.cross(&rz);
    Ok((knee, Rot::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[rx, ry, rz]))))
}

fn static_trial(params: &GaitParams) -> Result<(Vec<PoseSnapshot>, Vec<[Vec3; 3]>, Vec<[Vec3; 3]>, Vec<Contact>, BodyDimensions)> {
    let dims = params.dims;
    let reach = Side::BOTH
        .iter()
        .map(|s| dims.thigh(*s) + dims.shank(*s))
        .fold(f64::INFINITY, f64::min);
    // Slightly below full extension keeps both knees strictly inside their range.
    let mp = Vec3::new(0.0, 0.0, dims.floor_height + reach * (1.0 - 1e-9));
    let pose = stand_pose(&mp, &Quat::identity(), &dims, &Vec3::zeros(), 0.0)?;
    let n = params.frame_count();
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let mut p = pose;
        p.timestamp = k as f64 / params.sample_rate;
        poses.push(p);
    }
    let mut d = dims;
    d.pelvis_height = mp.z;
    let zero = [Vec3::zeros(); 3];
    Ok((poses, vec![zero; n], vec![zero; n], vec![Contact { left: true, right: true }; n], d))
}

fn stand_pose(mp: &Vec3, pelvis: &Quat, dims: &BodyDimensions, ankle_shift: &Vec3, timestamp: f64) -> Result<PoseSnapshot> {
    let forward = rotate_vector(pelvis, &Vec3::x());
    let mut parts = Vec::new();
    for side in Side::BOTH {
        let hip = hip_position(mp, pelvis, dims.pelvis_width, side);
        let ankle = Vec3::new(hip.x, hip.y, dims.floor_height) + ankle_shift;
        let (knee, shank) = leg_ik(&hip, &ankle, &forward, dims.thigh(side), dims.shank(side))?;
        parts.push((hip, knee, ankle, shank));
    }
    build_pose(mp, pelvis, &parts, timestamp)
}

fn build_pose(mp: &Vec3, pelvis: &Quat, parts: &[(Vec3, Vec3, Vec3, Rot)], timestamp: f64) -> Result<PoseSnapshot> {
    let mut thighs = Vec::new();
    for (hip, knee, _, shank) in parts {
        let dir = (hip - knee).normalize();
        thighs.push(rotation_to_quat(&thigh_orientation(&dir, shank)?));
    }
    let (l, r) = (&parts[0], &parts[1]);
    Ok(PoseSnapshot {
        timestamp,
        mid_pelvis: *mp,
        left_hip: l.0,
        right_hip: r.0,
        left_knee: l.1,
        right_knee: r.1,
        left_ankle: l.2,
        right_ankle: r.2,
        orientations: SegmentOrientations {
            pelvis: *pelvis,
            left_thigh: thighs[0],
            right_thigh: thighs[1],
            left_shank: rotation_to_quat(&l.3),
            right_shank: rotation_to_quat(&r.3),
        },
    })
}

type Series = (Vec<PoseSnapshot>, Vec<[Vec3; 3]>, Vec<[Vec3; 3]>, Vec<Contact>, BodyDimensions);

/// Hip-ankle distance never exceeds this fraction of the full leg length.
const MAX_EXTENSION: f64 = 0.998;

type Sample = (f64, Kinematic, f64, [(Kinematic, bool); 2]);

/// Smallest constant downward shift of the pelvis that keeps every leg within
/// reach. Early swing, where the foot lags behind the advancing hip, is the
/// usual limit.
fn pelvis_drop(samples: &[Sample], dims: &BodyDimensions) -> Result<f64> {
    let mut drop: f64 = 0.0;
    for (t_out, pelvis, psi, ankles) in samples {
        let q_pelvis = quat_from_axis_angle(&Vec3::z(), *psi);
        for (side, (ankle, _)) in Side::BOTH.into_iter().zip(ankles) {
            let hip = hip_position(&pelvis.p, &q_pelvis, dims.pelvis_width, side);
            let limit = MAX_EXTENSION * (dims.thigh(side) + dims.shank(side));
            let d = hip - ankle.p;
            let horizontal = d.x.hypot(d.y);
            if horizontal >= limit {
                return Err(Error::InfeasibleGait(format!(
                    "{} foot {horizontal:.3} m from the hip at t = {t_out:.3} s",
                    side.name()
                )));
            }
            drop = drop.max(d.z - (limit * limit - horizontal * horizontal).sqrt());
        }
    }
    Ok(drop)
}

fn walking_trial(params: &GaitParams) -> Result<Series> {
    let gait = Gait::new(params)?;
    let dims = params.dims;
    let n = params.frame_count();
    let (mut poses, mut vels, mut accs, mut contacts) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    // Start one stride in so both feet have a footprint behind them.
    let t0 = gait.period;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let t_out = k as f64 / params.sample_rate;
        let t = t0 + t_out;
        let (pelvis, psi) = gait.pelvis(t);
        let ankles = [gait.ankle(Side::Left, t), gait.ankle(Side::Right, t)];
        samples.push((t_out, pelvis, psi, ankles));
    }
    let drop = pelvis_drop(&samples, &dims)?;
    for (t_out, mut pelvis, psi, ankles) in samples {
        pelvis.p.z -= drop;
        let q_pelvis = quat_from_axis_angle(&Vec3::z(), psi);
        let (forward, _) = heading_axes(psi);
        let mut parts = Vec::with_capacity(2);
        let mut contact = Contact::default();
        for (side, (ankle, stance)) in Side::BOTH.into_iter().zip(&ankles) {
            contact.set(side, *stance);
            let hip = hip_position(&pelvis.p, &q_pelvis, dims.pelvis_width, side);
            let (knee, shank) = leg_ik(&hip, &ankle.p, &forward, dims.thigh(side), dims.shank(side))
                .map_err(|e| Error::InfeasibleGait(format!("{} leg at t = {t_out:.3} s: {e}", side.name())))?;
            parts.push((hip, knee, ankle.p, shank));
        }
        poses.push(build_pose(&pelvis.p, &q_pelvis, &parts, t_out)?);
        vels.push([pelvis.v, ankles[0].0.v, ankles[1].0.v]);
        accs.push([pelvis.a, ankles[0].0.a, ankles[1].0.a]);
        contacts.push(contact);
    }
    let mut d = dims;
    d.pelvis_height = gait.z_mean - drop;
    Ok((poses, vels, accs, contacts, d))
}

/// Ground-truth trial from gait parameters.
pub fn generate_gait(params: &GaitParams) -> Result<GroundTruthTrial> {
    params.validate()?;
    let (poses, velocities, accels, contacts, dims) = if params.is_static() {
        static_trial(params)?
    } else {
        walking_trial(params)?
    };
    if poses.is_empty() {
        return Err(Error::InvalidParameter("trial has no frames".into()));
    }
    let mounts = params.mount_offsets();
    let gravity = Vec3::from(crate::preprocess::DEFAULT_GRAVITY);

    let mut frames = Vec::with_capacity(poses.len());
    let mut raw = Vec::with_capacity(poses.len());
    for ((pose, acc), contact) in poses.iter().zip(&accels).zip(&contacts) {
        let oris = pose.orientations.instrumented();
        frames.push(ImuFrame { timestamp: pose.timestamp, accel_world: *acc, orientations: oris, contact: *contact });
        let sample = |segment: &Quat, mount: &Quat, a: &Vec3| {
            let q = quat_multiply(segment, mount);
            RawImuSample {
                timestamp: pose.timestamp,
                accel: rotate_vector(&q.inverse(), &(a + gravity)),
                gyro: Vec3::zeros(),
                sensor_orientation: q,
            }
        };
        raw.push(RawFrame {
            pelvis: sample(&oris.pelvis, &mounts.pelvis, &acc[0]),
            left_shank: sample(&oris.left_shank, &mounts.left_shank, &acc[1]),
            right_shank: sample(&oris.right_shank, &mounts.right_shank, &acc[2]),
        });
    }

    let events = StepEvents {
        left: flags_to_intervals(&contacts.iter().map(|c| c.left).collect::<Vec<_>>()),
        right: flags_to_intervals(&contacts.iter().map(|c| c.right).collect::<Vec<_>>()),
    };
    let first = &poses[0];
    let initial_state = FilterState::stack(
        &first.mid_pelvis,
        &first.left_ankle,
        &first.right_ankle,
        &velocities[0][0],
        &velocities[0][1],
        &velocities[0][2],
    );
    let onsets = |side: Side| events.side(side).iter().map(|iv| iv.0).collect::<Vec<_>>();
    let (left_on, right_on) = (onsets(Side::Left), onsets(Side::Right));
    let xy = |f: fn(&PoseSnapshot) -> Vec3| poses.iter().map(f).collect::<Vec<_>>();
    let travelled = [
        travelled_distance(&xy(|p| p.mid_pelvis), &left_on)?,
        travelled_distance(&xy(|p| p.left_ankle), &left_on)?,
        travelled_distance(&xy(|p| p.right_ankle), &right_on)?,
    ];

    Ok(GroundTruthTrial {
        params: params.clone(),
        dims,
        poses,
        frames,
        raw,
        mounts,
        events,
        velocities,
        initial_state,
        travelled_distance: travelled,
    })
}

fn check_noise(accel_sd: f64, ori_sd: f64) -> Result<(Normal<f64>, Normal<f64>)> {
    let make = |sd: f64, name: &str| {
        if !(sd.is_finite() && sd >= 0.0) {
            return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {sd}")));
        }
        Normal::new(0.0, sd).map_err(|e| Error::InvalidParameter(e.to_string()))
    };
    Ok((make(accel_sd, "accel_noise_sd")?, make(ori_sd, "ori_noise_sd")?))
}

fn draw_vec(dist: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng))
}

/// Adds Gaussian noise to world accelerations and small random rotations to
/// the segment orientations. Zero noise returns the frames unchanged.
pub fn corrupt(trial: &GroundTruthTrial, accel_noise_sd: f64, ori_noise_sd: f64, seed: u64) -> Result<Vec<ImuFrame>> {
    corrupt_frames(&trial.frames, accel_noise_sd, ori_noise_sd, seed)
}

pub fn corrupt_frames(frames: &[ImuFrame], accel_noise_sd: f64, ori_noise_sd: f64, seed: u64) -> Result<Vec<ImuFrame>> {
    let (acc, ori) = check_noise(accel_noise_sd, ori_noise_sd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frames.to_vec();
    for f in &mut out {
        if accel_noise_sd > 0.0 {
            for a in &mut f.accel_world {
                *a += draw_vec(&acc, &mut rng);
            }
        }
        if ori_noise_sd > 0.0 {
            let o = &mut f.orientations;
            for q in [&mut o.pelvis, &mut o.left_shank, &mut o.right_shank] {
                let delta = rotation_to_quat(&so3_exp(&draw_vec(&ori, &mut rng)));
                *q = quat_multiply(q, &delta);
            }
        }
    }
    Ok(out)
}

/// Sensor-level counterpart of [`corrupt`]: noise on the sensor-frame
/// accelerometer reading and on the reported sensor orientation. The reading
/// stays consistent with the true orientation, so orientation errors leak
/// gravity into the world-frame acceleration as they would on hardware.
pub fn corrupt_raw(raw: &[RawFrame], accel_noise_sd: f64, ori_noise_sd: f64, seed: u64) -> Result<Vec<RawFrame>> {
    let (acc, ori) = check_noise(accel_noise_sd, ori_noise_sd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = raw.to_vec();
    for f in &mut out {
        for s in [&mut f.pelvis, &mut f.left_shank, &mut f.right_shank] {
            if accel_noise_sd > 0.0 {
                s.accel += draw_vec(&acc, &mut rng);
            }
            if ori_noise_sd > 0.0 {
                let delta = rotation_to_quat(&so3_exp(&draw_vec(&ori, &mut rng)));
                s.sensor_orientation = quat_multiply(&s.sensor_orientation, &delta);
            }
        }
    }
    Ok(out)
}

/// Poses' instrumented orientations, in the order used by [`ImuFrame`].
pub fn instrumented(poses: &[PoseSnapshot]) -> Vec<InstrumentedOrientations> {
    poses.iter().map(|p| p.orientations.instrumented()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::pose_knee_angle;
    use crate::ckf::{build_constraints, KneeLimits};
    use crate::so3::quat_distance;

    fn short(path: PathKind) -> GaitParams {
        GaitParams { path, duration: 8.0, ..GaitParams::default() }
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(GAUSS_POINTS);
        for deg in 0..2 * GAUSS_POINTS {
            let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
            let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
            assert!((got - exact).abs() < 1e-14, "degree {deg}: {got}");
        }
    }

    #[test]
    fn figure_eight_closes() {
        let path = Path::new(PathKind::FigureEight, 40.0);
        let end = path.xy(FIGURE_EIGHT_PERIOD);
        assert!(end[0].abs() < 1e-12 && end[1].abs() < 1e-12, "{end:?}");
        let again = path.xy(2.0 * FIGURE_EIGHT_PERIOD);
        assert!(again[0].abs() < 1e-12 && again[1].abs() < 1e-12);
    }

    #[test]
    fn path_derivatives_match_finite_differences() {
        for kind in [PathKind::FigureEight, PathKind::Zigzag] {
            let path = Path::new(kind, 30.0);
            for s in [0.3, 2.7, 5.1, 11.9] {
                let h = 1e-5;
                let (a, b) = (path.xy(s - h), path.xy(s + h));
                let psi = path.heading(s);
                assert!(((b[0] - a[0]) / (2.0 * h) - psi.cos()).abs() < 1e-8);
                assert!(((b[1] - a[1]) / (2.0 * h) - psi.sin()).abs() < 1e-8);
                let k = (path.heading(s + h) - path.heading(s - h)) / (2.0 * h);
                assert!((k - path.curvature(s)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn profile_derivatives() {
        for t in [0.0, 0.1, 0.37, 0.5, 0.81, 1.0] {
            let h = 1e-6;
            let (m0, dm, ddm) = min_jerk(t);
            let (mp, dmp, _) = min_jerk(t + h);
            let (mm, dmm, _) = min_jerk(t - h);
            assert!(((mp - mm) / (2.0 * h) - dm).abs() < 1e-6);
            assert!(((dmp - dmm) / (2.0 * h) - ddm).abs() < 1e-5);
            let (g0, dg, ddg) = lift_profile(t);
            let (gp, dgp, _) = lift_profile(t + h);
            let (gm, dgm, _) = lift_profile(t - h);
            assert!(((gp - gm) / (2.0 * h) - dg).abs() < 1e-6);
            assert!(((dgp - dgm) / (2.0 * h) - ddg).abs() < 1e-5);
            let _ = (m0, g0);
        }
        assert_eq!(min_jerk(0.0), (0.0, 0.0, 0.0));
        let end = min_jerk(1.0);
        assert!((end.0 - 1.0).abs() < 1e-15 && end.1.abs() < 1e-12 && end.2.abs() < 1e-12);
        assert!((lift_profile(0.5).0 - 1.0).abs() < 1e-15);
        assert_eq!(lift_profile(0.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn static_trial_is_still() {
        let params = GaitParams { cadence: 0.0, duration: 2.0, ..GaitParams::default() };
        let trial = generate_gait(&params).unwrap();
        assert_eq!(trial.len(), 200);
        assert!(trial.frames.iter().all(|f| f.accel_world.iter().all(|a| *a == Vec3::zeros())));
        assert_eq!(trial.events.left, vec![(0, 199)]);
        for side in Side::BOTH {
            let a = pose_knee_angle(&trial.poses[0], side).unwrap();
            assert!((0.0..1e-3).contains(&a));
        }
    }

    #[test]
    fn generated_frames_satisfy_constraints() {
        for kind in [PathKind::Straight, PathKind::FigureEight, PathKind::Zigzag] {
            let trial = generate_gait(&short(kind)).unwrap();
            for (pose, frame) in trial.poses.iter().zip(&trial.frames) {
                let mut st = FilterState::zeros();
                st.set_mid_pelvis(&pose.mid_pelvis);
                st.set_ankle(Side::Left, &pose.left_ankle);
                st.set_ankle(Side::Right, &pose.right_ankle);
                let sys = build_constraints(&st, &frame.orientations, &trial.dims, &KneeLimits::unbounded()).unwrap();
                assert_eq!(sys.len(), 4);
                for r in sys.residuals(&st.x) {
                    assert!(r.abs() < 1e-9, "{kind:?} t={}: {r}", pose.timestamp);
                }
                for side in Side::BOTH {
                    let tau = pose.hip(side) - pose.knee(side);
                    let ry = rotate_vector(pose.orientations.shank(side), &Vec3::y());
                    assert!(tau.dot(&ry).abs() < 1e-12);
                    let a = pose_knee_angle(pose, side).unwrap();
                    assert!((0.0..=PI).contains(&a));
                }
            }
        }
    }

    #[test]
    fn stance_has_zero_velocity_on_the_floor() {
        let trial = generate_gait(&short(PathKind::Zigzag)).unwrap();
        for side in Side::BOTH {
            let k = side_index(side) + 1;
            for &(s, e) in trial.events.side(side) {
                for i in s..=e {
                    assert_eq!(trial.velocities[i][k], Vec3::zeros());
                    assert_eq!(trial.poses[i].ankle(side).z, trial.dims.floor_height);
                }
            }
        }
    }

    #[test]
    fn accelerations_integrate_to_positions() {
        // Trapezoidal double integration over one stride.
        for kind in [PathKind::Straight, PathKind::FigureEight] {
            let trial = generate_gait(&short(kind)).unwrap();
            let dt = 1.0 / trial.params.sample_rate;
            let n = (2.0 / trial.params.cadence * trial.params.sample_rate) as usize;
            for k in 0..3 {
                let pos = |i: usize| match k {
                    0 => trial.poses[i].mid_pelvis,
                    1 => trial.poses[i].left_ankle,
                    _ => trial.poses[i].right_ankle,
                };
                let mut p = pos(0);
                let mut v = trial.velocities[0][k];
                for i in 1..=n {
                    let (a0, a1) = (trial.frames[i - 1].accel_world[k], trial.frames[i].accel_world[k]);
                    p += v * dt + (a0 * 2.0 + a1) * (dt * dt / 6.0);
                    v += (a0 + a1) * (0.5 * dt);
                    assert!((p - pos(i)).norm() < 1e-3, "{kind:?} point {k} frame {i}");
                }
            }
        }
    }

    #[test]
    fn velocities_match_position_differences() {
        let trial = generate_gait(&short(PathKind::FigureEight)).unwrap();
        let dt = 1.0 / trial.params.sample_rate;
        for i in 1..trial.len() - 1 {
            let fd = (trial.poses[i + 1].left_ankle - trial.poses[i - 1].left_ankle) / (2.0 * dt);
            assert!((fd - trial.velocities[i][1]).norm() < 2e-2);
            let fd = (trial.poses[i + 1].mid_pelvis - trial.poses[i - 1].mid_pelvis) / (2.0 * dt);
            assert!((fd - trial.velocities[i][0]).norm() < 2e-3);
        }
    }

    #[test]
    fn straight_walk_travelled_distance() {
        let params = GaitParams::default();
        let trial = generate_gait(&params).unwrap();
        for (k, side) in [(1, Side::Left), (2, Side::Right)] {
            let steps = trial.events.side(side).len() - 1;
            let expect = params.stride_length * steps as f64;
            assert!((trial.travelled_distance[k] - expect).abs() <= 0.01 * expect);
        }
    }

    #[test]
    fn raw_samples_reproduce_world_acceleration() {
        let trial = generate_gait(&short(PathKind::Zigzag)).unwrap();
        let frames = crate::preprocess::build_frames(&trial.raw, &trial.mounts, &Vec3::from(crate::preprocess::DEFAULT_GRAVITY));
        for (a, b) in frames.iter().zip(&trial.frames) {
            for k in 0..3 {
                assert!((a.accel_world[k] - b.accel_world[k]).norm() < 1e-12);
            }
            assert!(quat_distance(&a.orientations.left_shank, &b.orientations.left_shank) < 1e-9);
        }
    }

    #[test]
    fn infeasible_stride_is_rejected() {
        let params = GaitParams { stride_length: 3.5, ..short(PathKind::Straight) };
        assert!(matches!(generate_gait(&params), Err(Error::InfeasibleGait(_))));
        let params = GaitParams { peak_knee_flexion: 25.3f64.to_radians(), ..short(PathKind::Straight) };
        assert!(matches!(generate_gait(&params), Err(Error::InfeasibleGait(_))));
    }

    #[test]
    fn corruption() {
        let trial = generate_gait(&short(PathKind::Straight)).unwrap();
        assert_eq!(corrupt(&trial, 0.0, 0.0, 3).unwrap(), trial.frames);
        let a = corrupt(&trial, 0.5, 0.01, 3).unwrap();
        let b = corrupt(&trial, 0.5, 0.01, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, corrupt(&trial, 0.5, 0.01, 4).unwrap());
        assert!(corrupt(&trial, -1.0, 0.0, 3).is_err());

        let long = GaitParams { duration: 40.0, ..GaitParams::default() };
        let trial = generate_gait(&long).unwrap();
        let noisy = corrupt(&trial, 0.5, 0.0, 8).unwrap();
        let samples: Vec<f64> = noisy
            .iter()
            .zip(&trial.frames)
            .flat_map(|(n, t)| (0..3).flat_map(move |k| (n.accel_world[k] - t.accel_world[k]).iter().copied().collect::<Vec<_>>()))
            .collect();
        assert!(samples.len() >= 10_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        assert!((var / 0.25 - 1.0).abs() < 0.05, "{var}");
    }
}
