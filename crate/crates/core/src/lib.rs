//! Adaptive voxel map of probabilistic planes, built by recursive RANSAC plane
//! fitting with outlier reuse and a point-distribution validity check, plus a
//! scan-to-map LiDAR odometry pipeline on top of it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod io;
pub mod odometry;
pub mod plane;
pub mod synthetic;
pub mod validity;
pub mod voxel_map;

pub use geometry::{Mat3, Pose, PoseCov, Vec3, WorldPoint};
pub use odometry::{Odometry, OdometryConfig, OdometryError, OdometryState};
pub use plane::{Plane, PlaneFit};
pub use voxel_map::{MapConfig, VoxelKey, VoxelMap};
