//! Run configuration shared by the library workflows and the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body::BodyDimensions;
use crate::ckf::{NoiseConfig, DEFAULT_P0_SCALE};
use crate::error::{Error, Result};
use crate::metrics::MetricOptions;
use crate::preprocess::DEFAULT_GRAVITY;
use crate::synth::GaitParams;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Where stance intervals come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EventSource {
    #[default]
    Detect,
    /// The trial's events file.
    File,
}

/// Settings for generating a synthetic trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub gait: GaitParams,
    /// Standard deviation of sensor-frame accelerometer noise, m/s².
    pub accel_noise_sd: f64,
    /// Standard deviation of orientation noise per axis, radians.
    pub orientation_noise_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { gait: GaitParams::default(), accel_noise_sd: 0.0, orientation_noise_sd: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub noise: NoiseConfig,
    pub dims: BodyDimensions,
    /// m/s², world frame, z up.
    pub gravity: [f64; 3],
    /// Initial covariance is this times the identity.
    pub p0_scale: f64,
    /// Seconds.
    pub step_window: f64,
    /// Summed per-axis variance, (m/s²)².
    pub step_threshold: f64,
    pub events: EventSource,
    pub metrics: MetricOptions,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            noise: NoiseConfig::default(),
            dims: BodyDimensions::default(),
            gravity: DEFAULT_GRAVITY,
            p0_scale: DEFAULT_P0_SCALE,
            step_window: 0.25,
            step_threshold: 1.0,
            events: EventSource::Detect,
            metrics: MetricOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported format_version {} (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.noise.validate().map_err(wrap)?;
        self.dims.validate().map_err(wrap)?;
        self.synth.gait.validate().map_err(wrap)?;
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gravity must be finite".into()));
        }
        if !(self.p0_scale.is_finite() && self.p0_scale > 0.0) {
            return Err(Error::Config(format!("p0_scale must be positive, got {}", self.p0_scale)));
        }
        if !(self.step_window.is_finite() && self.step_window > 0.0) {
            return Err(Error::Config(format!("step_window must be positive, got {}", self.step_window)));
        }
        if !(self.step_threshold.is_finite() && self.step_threshold > 0.0) {
            return Err(Error::Config(format!("step_threshold must be positive, got {}", self.step_threshold)));
        }
        let sds = [self.synth.accel_noise_sd, self.synth.orientation_noise_sd];
        if sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise standard deviations must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
