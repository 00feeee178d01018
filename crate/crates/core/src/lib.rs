//! Hyperspectral anomaly change detection.
//!
//! Two co-registered acquisitions of the same scene are compared by training
//! a pair of bottleneck auto-encoder predictors, one per direction, on
//! pre-detected unchanged pixels. Each predictor maps one image into the
//! other's imaging condition; the per-pixel prediction error is a loss map,
//! and the elementwise minimum of the two loss maps is the anomaly change
//! intensity.
//!
//! The crate also ships the classical linear predictors (chronochrome,
//! covariance equalization), a difference-image RX detector, ROC/AUC
//! evaluation, and a synthetic scene generator with ground truth.

pub mod acda;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod hsi;
pub mod linalg;
pub mod matrix;
pub mod neural;
pub mod predetect;
pub mod synth;

pub use error::{Error, Result};
pub use hsi::{GroundTruthMask, HyperCube, IntensityMap, PixelMatrix};
pub use matrix::Matrix;
