//! Lower-body kinematics from three IMUs with a constrained Kalman filter.

pub mod body;
pub mod ckf;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod preprocess;
pub mod so3;
pub mod synth;
pub mod workflow;

pub use error::{Error, Result};
