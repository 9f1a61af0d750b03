//! Refined LiDAR instance pseudo-labels from 2D foundation-model outputs.
//!
//! The pipeline lifts 2D detections onto LiDAR sweeps ([`upg`]), refines the
//! resulting labels with voxel voting across frames ([`vsv`]), and scores
//! them ([`eval`]). [`losses`] holds the value-and-gradient kernels used to
//! train a 3D network on these labels, and [`synth`] generates synthetic
//! sequences with exact ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod synth;
pub mod upg;
pub mod vsv;

pub use error::{Error, Result};
