//! Geometric energy field for Gaussian-splat style particle sets: tri-state
//! voxel partition from simulated LiDAR, distance and gradient grids,
//! robust potentials with analytic forces, and a relaxation engine.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod energy;
pub mod error;
pub mod field;
pub mod lidar;
pub mod math;
pub mod metrics;
pub mod particles;
pub mod photometric;
pub mod relax;
pub mod scene;
pub mod validate;

pub use error::{Error, Result};
pub use math::{Aabb, Vec3};
