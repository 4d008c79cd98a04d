//! Task-oriented point-cloud sampling.
//!
//! The crate trains a sequential attention sampler that picks a small,
//! task-aware subset of a point cloud, and ships the supporting pieces:
//! differentiable geometry losses, classic baselines (farthest-point,
//! random, voxel), small frozen task networks to sample for, and training /
//! evaluation drivers behind a CLI.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod pointnet;
pub mod sampler;
pub mod tasknet;
pub mod training;

pub use error::{Error, Result};
