//! Constrained Kalman filter over pelvis and ankle kinematics.

mod constraints;
mod model;
mod sckf;
mod state;

pub use constraints::{
    build_constraints, state_knee_angle, ConstraintKind, ConstraintRow, ConstraintSystem, KneeLimits,
};
pub use model::{
    build_measurement, build_system_matrices, covariance_limit, covariance_update, measurement_update, predict,
    system_matrices, MeasurementModel, NoiseConfig, SystemMatrices,
};
pub use sckf::{sckf_project, termination_ratio, SckfOutcome};
pub use state::{
    ankle_pos_offset, ankle_vel_offset, Covariance, FilterState, InputVector, StateVector, POS_LEFT_ANKLE,
    POS_MID_PELVIS, POS_RIGHT_ANKLE, STATE_DIM, VEL_LEFT_ANKLE, VEL_MID_PELVIS, VEL_RIGHT_ANKLE,
};

use std::f64::consts::PI;

use crate::body::{assemble_pose, BodyDimensions, PoseSnapshot, Side};
use crate::error::{Error, Result};
use crate::preprocess::ImuFrame;

pub const DEFAULT_P0_SCALE: f64 = 0.5;

/// Initial state with covariance `p0_scale · I`.
pub fn initialize(x0: &StateVector, p0_scale: f64) -> Result<FilterState> {
    if !(p0_scale.is_finite() && p0_scale > 0.0) {
        return Err(Error::InvalidParameter(format!("p0_scale must be positive, got {p0_scale}")));
    }
    Ok(FilterState::new(*x0, Covariance::identity() * p0_scale))
}

/// Per-frame bookkeeping from the constraint projection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub sckf_iterations: usize,
    pub sckf_converged: bool,
    /// Largest absolute constraint residual after projection, meters.
    pub max_residual: f64,
    pub knee_max: KneeLimits,
}

/// Stateful filter for one trial.
#[derive(Debug, Clone)]
pub struct Filter {
    state: FilterState,
    dims: BodyDimensions,
    cfg: NoiseConfig,
    last_timestamp: Option<f64>,
    last_diagnostics: Option<StepDiagnostics>,
}

impl Filter {
    pub fn new(initial: FilterState, dims: BodyDimensions, cfg: NoiseConfig) -> Result<Self> {
        dims.validate()?;
        cfg.validate()?;
        Ok(Self {
            state: initial,
            dims,
            cfg,
            last_timestamp: None,
            last_diagnostics: None,
        })
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.cfg
    }

    pub fn dims(&self) -> &BodyDimensions {
        &self.dims
    }

    pub fn last_diagnostics(&self) -> Option<&StepDiagnostics> {
        self.last_diagnostics.as_ref()
    }

    /// Processes one frame. The first frame is treated as the initial
    /// instant: no prediction, only the update and projection.
    pub fn step(&mut self, frame: &ImuFrame) -> Result<PoseSnapshot> {
        let dt = match self.last_timestamp {
            None => 0.0,
            Some(t) => {
                let dt = frame.timestamp - t;
                if !(dt > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "timestamps must increase: {} after {t}",
                        frame.timestamp
                    )));
                }
                dt
            }
        };
        let sys = system_matrices(dt, &self.cfg.sigma2_acc);
        let mut u = InputVector::zeros();
        for (k, a) in frame.accel_world.iter().enumerate() {
            u.fixed_rows_mut::<3>(3 * k).copy_from(a);
        }

        let prior = predict(&self.state, &u, &sys);
        let meas = build_measurement(frame.contact, &self.dims, &self.cfg);
        let updated = measurement_update(&prior, &meas)?;

        let oris = &frame.orientations;
        let mut knee_max = KneeLimits::unbounded();
        for side in Side::BOTH {
            let a = state_knee_angle(&updated, oris, &self.dims, side)?;
            let a = a.clamp(0.0, PI);
            match side {
                Side::Left => knee_max.left = a,
                Side::Right => knee_max.right = a,
            }
        }

        let posterior = if self.cfg.covariance_limiter {
            covariance_limit(&updated, &meas, &self.cfg)?
        } else {
            covariance_update(&updated, &meas)?
        };
        let projected = sckf_project(&posterior, oris, &self.dims, &knee_max, &self.cfg)?;
        let pose = assemble_pose(&projected.state, oris, &self.dims, frame.timestamp)?;

        self.last_diagnostics = Some(StepDiagnostics {
            sckf_iterations: projected.iterations,
            sckf_converged: projected.converged,
            max_residual: projected.residuals.iter().fold(0.0, |m, r| m.max(r.abs())),
            knee_max,
        });
        self.state = projected.state;
        self.last_timestamp = Some(frame.timestamp);
        Ok(pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{pose_knee_angle, InstrumentedOrientations};
    use crate::preprocess::Contact;
    use crate::so3::{Quat, Vec3};

    fn standing(dims: &BodyDimensions) -> StateVector {
        let mp = Vec3::new(0.0, 0.0, dims.floor_height + dims.left_thigh + dims.left_shank);
        let half = dims.pelvis_width / 2.0;
        FilterState::stack(
            &mp,
            &Vec3::new(0.0, half, dims.floor_height),
            &Vec3::new(0.0, -half, dims.floor_height),
            &Vec3::zeros(),
            &Vec3::zeros(),
            &Vec3::zeros(),
        )
    }

    #[test]
    fn covariance_stays_symmetric_psd_on_a_walk() {
        use crate::config::{EventSource, RunConfig, SynthConfig};
        use crate::synth::GaitParams;
        use crate::workflow::{initial_state_from_poses, synthesize, trial_frames};

        let cfg = RunConfig {
            events: EventSource::File,
            synth: SynthConfig {
                gait: GaitParams { duration: 5.0, ..Default::default() },
                accel_noise_sd: 0.5,
                orientation_noise_sd: 0.02,
            },
            ..Default::default()
        };
        let (_, files) = synthesize(&cfg, Some(2)).unwrap();
        let run_cfg = files.config.clone().unwrap();
        let mut frames = trial_frames(&files, &run_cfg).unwrap();
        crate::preprocess::apply_contact(&mut frames, files.events.as_ref().unwrap());
        let x0 = initial_state_from_poses(files.reference.as_ref().unwrap()).unwrap();
        let mut f = Filter::new(initialize(&x0, 0.5).unwrap(), run_cfg.dims, run_cfg.noise).unwrap();
        for frame in &frames {
            f.step(frame).unwrap();
            let p = &f.state().p;
            assert!((p - p.transpose()).amax() <= 1e-9);
            assert!(p.symmetric_eigenvalues().min() >= -1e-9);
        }
    }

    #[test]
    fn initial_covariance() {
        let s = initialize(&StateVector::zeros(), DEFAULT_P0_SCALE).unwrap();
        assert!(s.p.diagonal().iter().all(|v| *v == 0.5));
        assert_eq!(s.p, s.p.transpose());
        assert!(initialize(&StateVector::zeros(), 0.0).is_err());
    }

    #[test]
    fn standing_still_is_stationary() {
        let dims = BodyDimensions::default();
        let x0 = standing(&dims);
        let mut f = Filter::new(initialize(&x0, 0.5).unwrap(), dims, NoiseConfig::default()).unwrap();
        let id = Quat::identity();
        let oris = InstrumentedOrientations { pelvis: id, left_shank: id, right_shank: id };
        let mut first = None;
        for k in 0..1000 {
            let frame = ImuFrame {
                timestamp: k as f64 * 0.01,
                accel_world: [Vec3::zeros(); 3],
                orientations: oris,
                contact: Contact { left: true, right: true },
            };
            let pose = f.step(&frame).unwrap();
            let first = *first.get_or_insert(pose);
            for j in crate::body::Joint::ALL {
                assert!((pose.joint(j) - first.joint(j)).norm() < 1e-3);
            }
            for side in Side::BOTH {
                let a = pose_knee_angle(&pose, side).unwrap();
                assert!((-1e-9..=PI).contains(&a));
            }
            let p = &f.state().p;
            assert!((p - p.transpose()).amax() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_increasing_time() {
        let dims = BodyDimensions::default();
        let mut f = Filter::new(initialize(&standing(&dims), 0.5).unwrap(), dims, NoiseConfig::default()).unwrap();
        let id = Quat::identity();
        let frame = ImuFrame {
            timestamp: 0.0,
            accel_world: [Vec3::zeros(); 3],
            orientations: InstrumentedOrientations { pelvis: id, left_shank: id, right_shank: id },
            contact: Contact::default(),
        };
        f.step(&frame).unwrap();
        assert!(f.step(&frame).is_err());
    }
}
