//! File formats, run configuration, datasets and trajectory evaluation.

mod config;
mod dataset;
mod eval;
mod kitti;
mod ply;
mod tum;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::Pose;

pub use config::{RunConfig, SceneKind, SynthConfig};
pub use dataset::{write_dataset, Dataset};
pub use eval::{align_rigid, associate, ate_rmse, ASSOCIATION_TOLERANCE};
pub use kitti::{read_scan_kitti_bin, write_scan_kitti_bin};
pub use ply::{plane_quad, read_scan_ply_ascii, write_map_ply, write_points_ply};
pub use tum::{format_g9, read_trajectory_tum, write_trajectory_tum};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("only {pairs} timestamp pairs could be associated")]
    NoOverlap { pairs: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("timestamps must be strictly increasing ({previous} then {next})")]
    NonMonotonic { previous: f64, next: f64 },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        IoError::MalformedFile {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Timestamped poses with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(f64, Pose)>) -> Result<Self, IoError> {
        let mut t = Self::new();
        for (time, pose) in entries {
            t.push(time, pose)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, time: f64, pose: Pose) -> Result<(), IoError> {
        if let Some(&(previous, _)) = self.entries.last() {
            if !(time > previous) {
                return Err(IoError::NonMonotonic { previous, next: time });
            }
        }
        self.entries.push((time, pose));
        Ok(())
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Apply `transform` on the left of every pose.
    pub fn transformed(&self, transform: &Pose) -> Trajectory {
        Trajectory {
            entries: self.entries.iter().map(|(t, p)| (*t, transform.compose(p))).collect(),
        }
    }
}
