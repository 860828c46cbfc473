//! Nonparametric analysis of q-space diffusion measurements.
//!
//! The pipeline runs `phantom` (or ingested data) through `estimator` to a
//! filled [`geometry::CircleGrid`], from which `stats` computes summaries,
//! test statistics and a voxel classification.

pub mod calibration;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod phantom;
pub mod stats;

pub use error::{Error, Result};
