//! End-to-end steps used by the command line: synthesize, estimate, evaluate.

use std::path::Path;

use crate::body::{hip_position, BodyDimensions, Joint, PoseSnapshot, Side};
use crate::ckf::{initialize, Filter, FilterState, NoiseConfig, StateVector, StepDiagnostics};
use crate::config::{EventSource, RunConfig};
use crate::error::{Error, Result};
use crate::io::{self, TrialFileSet};
use crate::metrics::{evaluate, MetricReport};
use crate::preprocess::{apply_contact, build_frames, detect_step_events, ImuFrame, MountOffsets, StepEvents};
use crate::so3::{Quat, Vec3};
use crate::synth::{corrupt_raw, generate_gait, GroundTruthTrial};

/// State from the first three reference frames: positions of frame 0 and
/// second-order one-sided velocities.
pub fn initial_state_from_poses(poses: &[PoseSnapshot]) -> Result<StateVector> {
    if poses.len() < 3 {
        return Err(Error::InvalidParameter("need at least three reference frames".into()));
    }
    let (t0, t1, t2) = (poses[0].timestamp, poses[1].timestamp, poses[2].timestamp);
    let dt = t1 - t0;
    if !(dt > 0.0) || ((t2 - t1) - dt).abs() > 1e-6 * dt {
        return Err(Error::InvalidParameter("first reference frames are not uniformly sampled".into()));
    }
    let points = [Joint::MidPelvis, Joint::LeftAnkle, Joint::RightAnkle];
    let pos = points.map(|j| poses[0].joint(j));
    let vel = points.map(|j| (poses[0].joint(j) * -3.0 + poses[1].joint(j) * 4.0 - poses[2].joint(j)) / (2.0 * dt));
    Ok(FilterState::stack(&pos[0], &pos[1], &pos[2], &vel[0], &vel[1], &vel[2]))
}

/// Upright stance at rest: pelvis at its standing height above the origin,
/// ankles on the floor below the hips.
pub fn standing_state(dims: &BodyDimensions, pelvis: &Quat) -> StateVector {
    let mp = Vec3::new(0.0, 0.0, dims.pelvis_height);
    let ankle = |side| {
        let hip = hip_position(&mp, pelvis, dims.pelvis_width, side);
        Vec3::new(hip.x, hip.y, dims.floor_height)
    };
    let zero = Vec3::zeros();
    FilterState::stack(&mp, &ankle(Side::Left), &ankle(Side::Right), &zero, &zero, &zero)
}

/// Runs the filter over a frame series.
pub fn run_filter(
    frames: &[ImuFrame],
    x0: &StateVector,
    dims: &BodyDimensions,
    noise: &NoiseConfig,
    p0_scale: f64,
) -> Result<(Vec<PoseSnapshot>, Vec<StepDiagnostics>)> {
    let mut filter = Filter::new(initialize(x0, p0_scale)?, *dims, noise.clone())?;
    let mut poses = Vec::with_capacity(frames.len());
    let mut diags = Vec::with_capacity(frames.len());
    for f in frames {
        poses.push(filter.step(f)?);
        diags.push(filter.last_diagnostics().cloned().expect("set by step"));
    }
    let failed = diags.iter().filter(|d| !d.sckf_converged).count();
    if failed > 0 {
        log::warn!("constraint projection did not converge on {failed} of {} frames", frames.len());
    }
    Ok((poses, diags))
}

/// Mean sampling rate from timestamps.
pub fn sample_rate(timestamps: &[f64]) -> Result<f64> {
    match timestamps {
        [first, .., last] if last > first => Ok((timestamps.len() - 1) as f64 / (last - first)),
        _ => Err(Error::InvalidParameter("need at least two increasing timestamps".into())),
    }
}

/// Step events requested by the configuration.
pub fn resolve_events(frames: &[ImuFrame], cfg: &RunConfig, file: Option<&StepEvents>) -> Result<StepEvents> {
    match cfg.events {
        EventSource::File => file
            .cloned()
            .ok_or_else(|| Error::Config("event source is `file` but the trial has no events file".into())),
        EventSource::Detect => {
            let times: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
            let fs = sample_rate(&times)?;
            Ok(detect_step_events(frames, fs, cfg.step_window, cfg.step_threshold))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub poses: Vec<PoseSnapshot>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub events: StepEvents,
}

/// Filter inputs for a trial. With a reference, the mounting offsets are
/// calibrated on its first frame; otherwise sensors are taken as aligned.
pub fn trial_frames(trial: &TrialFileSet, cfg: &RunConfig) -> Result<Vec<ImuFrame>> {
    let first = trial.raw.first().ok_or(Error::EmptySeries)?;
    let offsets = match &trial.reference {
        Some(r) => MountOffsets::calibrate(&r[0].orientations.instrumented(), &first.sensor_orientations()),
        None => {
            log::warn!("no reference pose: assuming sensors are aligned with their segments");
            MountOffsets::identity()
        }
    };
    Ok(build_frames(&trial.raw, &offsets, &Vec3::from(cfg.gravity)))
}

/// Runs the estimator on a loaded trial.
pub fn estimate_trial(trial: &TrialFileSet, cfg: &RunConfig) -> Result<Estimate> {
    let mut frames = trial_frames(trial, cfg)?;
    let events = resolve_events(&frames, cfg, trial.events.as_ref())?;
    events.validate(frames.len())?;
    apply_contact(&mut frames, &events);
    let x0 = match &trial.reference {
        Some(r) => initial_state_from_poses(r)?,
        None => standing_state(&cfg.dims, &frames[0].orientations.pelvis),
    };
    let (poses, diagnostics) = run_filter(&frames, &x0, &cfg.dims, &cfg.noise, cfg.p0_scale)?;
    Ok(Estimate { poses, diagnostics, events })
}

/// Stance onsets per side, in sample indices.
pub fn stance_onsets(events: &StepEvents) -> [Vec<usize>; 2] {
    Side::BOTH.map(|s| events.side(s).iter().map(|iv| iv.0).collect())
}

/// Metrics of an estimate against the trial reference. Travelled distance
/// uses the trial's events file when present, detected events otherwise.
pub fn evaluate_trial(estimate: &[PoseSnapshot], trial: &TrialFileSet, cfg: &RunConfig) -> Result<MetricReport> {
    let reference = trial
        .reference
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs a reference file".into()))?;
    let events = match &trial.events {
        Some(e) => e.clone(),
        None => {
            let frames = trial_frames(trial, cfg)?;
            let detect = RunConfig { events: EventSource::Detect, ..cfg.clone() };
            resolve_events(&frames, &detect, None)?
        }
    };
    let [left, right] = stance_onsets(&events);
    evaluate(estimate, reference, &left, &right, &cfg.metrics)
}

/// Synthetic trial and its file set. The seed, when given, replaces the one
/// in the configuration and drives the sensor noise.
pub fn synthesize(cfg: &RunConfig, seed: Option<u64>) -> Result<(GroundTruthTrial, TrialFileSet)> {
    let mut gait = cfg.synth.gait.clone();
    if let Some(s) = seed {
        gait.rng_seed = s;
    }
    let trial = generate_gait(&gait)?;
    let raw = corrupt_raw(&trial.raw, cfg.synth.accel_noise_sd, cfg.synth.orientation_noise_sd, gait.rng_seed)?;
    let mut written = cfg.clone();
    written.synth.gait = gait;
    written.dims = trial.dims;
    let files = TrialFileSet {
        raw,
        reference: Some(trial.poses.clone()),
        events: Some(trial.events.clone()),
        config: Some(written),
    };
    Ok((trial, files))
}

/// Writes a synthetic trial into `dir`.
pub fn synth_to_dir(cfg: &RunConfig, seed: Option<u64>, dir: &Path) -> Result<()> {
    let (_, files) = synthesize(cfg, seed)?;
    files.write(dir)
}

/// Estimates the trial in `input` and writes `estimate.csv` into `output`.
pub fn estimate_dir(cfg: &RunConfig, input: &Path, output: &Path) -> Result<Estimate> {
    estimate_to_dir(cfg, &TrialFileSet::load(input)?, output)
}

pub fn estimate_to_dir(cfg: &RunConfig, trial: &TrialFileSet, output: &Path) -> Result<Estimate> {
    let est = estimate_trial(trial, cfg)?;
    create_dir(output)?;
    io::write_pose_csv(&output.join(io::ESTIMATE_FILE), &est.poses, Some(&est.diagnostics))?;
    Ok(est)
}

/// Compares `estimate.csv` in `estimate_dir` against the trial in `input`
/// and writes `metrics.json` into `output`.
pub fn evaluate_dir(cfg: &RunConfig, input: &Path, estimate_dir: &Path, output: &Path) -> Result<MetricReport> {
    evaluate_to_dir(cfg, &TrialFileSet::load(input)?, estimate_dir, output)
}

pub fn evaluate_to_dir(cfg: &RunConfig, trial: &TrialFileSet, estimate_dir: &Path, output: &Path) -> Result<MetricReport> {
    let est = io::read_pose_csv(&estimate_dir.join(io::ESTIMATE_FILE))?;
    let report = evaluate_trial(&est, trial, cfg)?;
    create_dir(output)?;
    io::write_json(&output.join(io::METRICS_FILE), &report)?;
    Ok(report)
}

/// Synthesizes, estimates and evaluates in one directory. The estimate uses
/// the configuration written alongside the trial.
pub fn pipeline(cfg: &RunConfig, seed: Option<u64>, dir: &Path) -> Result<MetricReport> {
    synth_to_dir(cfg, seed, dir)?;
    let written = RunConfig::load(&dir.join(io::CONFIG_FILE))?;
    estimate_dir(&written, dir, dir)?;
    evaluate_dir(&written, dir, dir, dir)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}
