//! Gyroscope-pair calibration.
//!
//! Given synchronized angular-velocity streams from two rigidly mounted
//! 3-axis gyroscopes, this crate recovers the rotation between their frames
//! and their per-axis scale factors (up to a global scale) with a closed-form
//! least-squares solver. The mixing matrix `A = S1 C S2^-1` is estimated from
//! mean-centered measurement pairs, then factored according to which axes of
//! the two sensors are parallel.
//!
//! # Modules
//!
//! - [`geometry`]: 3-D types, SO(3) exponential/logarithm, polar projection
//!   and the error metrics.
//! - [`preprocess`]: time-offset estimation, spline resampling, pair
//!   selection, centering and SNR.
//! - [`direct`]: the closed-form solver and configuration classifier.
//! - [`iterative`]: a Gauss-Newton reference solver.
//! - [`analysis`]: covariance bound, skewness error prediction, residuals,
//!   flex detection and Monte-Carlo statistics.
//! - [`sim`]: ground-truth scenario generation.
//! - [`io`]: CSV streams and ground-truth JSON.
//!
//! # Conventions
//!
//! - `C` maps vectors from gyro-2 coordinates to gyro-1 coordinates:
//!   `w1 = C w2` for true rates.
//! - All angles are radians and all rates rad/s.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod direct;
pub mod error;
pub mod geometry;
pub mod io;
pub mod iterative;
pub mod preprocess;
pub mod sim;

pub use direct::{
    calibrate, CalibrateOptions, CalibrationResult, ConfigClass, Diagnostics, MixingMatrix,
    Observability,
};
pub use error::{Error, Result};
pub use geometry::{rotation_error, scale_error, Axis, Mat3, Rotation, ScaleVector, Vec3};
pub use preprocess::{AlignedPairs, GyroSample, GyroStream, SelectionPolicy};
