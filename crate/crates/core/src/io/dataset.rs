use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::kitti::{read_scan_kitti_bin, write_scan_kitti_bin};
use super::tum::{read_trajectory_tum, write_trajectory_tum};
use super::{IoError, Trajectory};
use crate::geometry::Vec3;

/// Scan period assumed when a dataset has no `times.txt`, s.
const DEFAULT_PERIOD: f64 = 0.1;

/// A KITTI-style sequence directory:
///
/// ```text
/// <dir>/velodyne/000000.bin ...
/// <dir>/times.txt          optional, one timestamp per scan
/// <dir>/groundtruth.txt    optional, TUM format
/// ```
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    scans: Vec<PathBuf>,
    times: Vec<f64>,
    ground_truth: Option<Trajectory>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, IoError> {
        let velodyne = dir.join("velodyne");
        let mut scans: Vec<PathBuf> = std::fs::read_dir(&velodyne)
            .map_err(|e| IoError::io(&velodyne, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        scans.sort();

        let times_path = dir.join("times.txt");
        let times = if times_path.exists() {
            let text = std::fs::read_to_string(&times_path).map_err(|e| IoError::io(&times_path, e))?;
            let times: Vec<f64> = text
                .split_whitespace()
                .map(|v| v.parse::<f64>().ok().filter(|t| t.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| IoError::malformed(&times_path, "bad timestamp"))?;
            if times.len() != scans.len() {
                return Err(IoError::malformed(
                    &times_path,
                    format!("{} timestamps for {} scans", times.len(), scans.len()),
                ));
            }
            if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
                return Err(IoError::NonMonotonic { previous: w[0], next: w[1] });
            }
            times
        } else {
            (0..scans.len()).map(|k| DEFAULT_PERIOD * k as f64).collect()
        };

        let gt_path = dir.join("groundtruth.txt");
        let ground_truth = if gt_path.exists() { Some(read_trajectory_tum(&gt_path)?) } else { None };

        Ok(Self {
            root: dir.to_path_buf(),
            scans,
            times,
            ground_truth,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn ground_truth(&self) -> Option<&Trajectory> {
        self.ground_truth.as_ref()
    }

    /// Points of scan `index` in the sensor frame; intensities are dropped.
    pub fn scan(&self, index: usize) -> Result<Vec<Vec3>, IoError> {
        Ok(read_scan_kitti_bin(&self.scans[index])?.into_iter().map(|(p, _)| p).collect())
    }
}

/// Write scans, timestamps and optional ground truth in the layout read by
/// [`Dataset::open`].
pub fn write_dataset(
    dir: &Path,
    scans: &[Vec<Vec3>],
    times: &[f64],
    ground_truth: Option<&Trajectory>,
) -> Result<(), IoError> {
    if times.len() != scans.len() {
        return Err(IoError::Config(format!("{} timestamps for {} scans", times.len(), scans.len())));
    }
    let velodyne = dir.join("velodyne");
    std::fs::create_dir_all(&velodyne).map_err(|e| IoError::io(&velodyne, e))?;
    for (k, scan) in scans.iter().enumerate() {
        let pts: Vec<(Vec3, f32)> = scan.iter().map(|p| (*p, 0.0)).collect();
        write_scan_kitti_bin(&velodyne.join(format!("{k:06}.bin")), &pts)?;
    }
    let mut text = String::new();
    for t in times {
        let _ = writeln!(text, "{t:.9}");
    }
    let times_path = dir.join("times.txt");
    std::fs::write(&times_path, text).map_err(|e| IoError::io(&times_path, e))?;
    if let Some(gt) = ground_truth {
        write_trajectory_tum(gt, &dir.join("groundtruth.txt"))?;
    }
    Ok(())
}
