//! Alignment, online calibration, kernel-predicted depth filtering and
//! synthetic data generation for ToF RGB-D camera modules.

pub mod calib;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod kpn;
pub mod metrics;
pub mod tof_sim;

pub use error::{Error, Result};
pub use imaging::{Boundary, FlowField, ImageBuffer, Mask};
