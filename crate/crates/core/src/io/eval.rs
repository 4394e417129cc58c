use nalgebra::Matrix3;

use super::{IoError, Trajectory};
use crate::geometry::{Pose, Vec3};

/// Maximum timestamp difference for two poses to be paired, s.
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;

/// Pair each estimate with the nearest unused ground-truth timestamp within
/// [`ASSOCIATION_TOLERANCE`]. Returns `(estimate position, ground-truth position)`.
pub fn associate(estimate: &Trajectory, ground_truth: &Trajectory) -> Vec<(Vec3, Vec3)> {
    let gt = ground_truth.entries();
    let mut used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (t, pose) in estimate.entries() {
        let i = gt.partition_point(|(g, _)| g < t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt.len() && !used[j])
            .min_by(|&a, &b| (gt[a].0 - t).abs().total_cmp(&(gt[b].0 - t).abs()));
        if let Some(j) = best {
            if (gt[j].0 - t).abs() <= ASSOCIATION_TOLERANCE {
                used[j] = true;
                pairs.push((pose.translation, gt[j].1.translation));
            }
        }
    }
    pairs
}

/// Rigid transform `T` minimizing `Σ ‖g − T·e‖²` over `(e, g)` pairs (no scale).
pub fn align_rigid(pairs: &[(Vec3, Vec3)]) -> Pose {
    let n = pairs.len() as f64;
    let ce = pairs.iter().map(|(e, _)| e).sum::<Vec3>() / n;
    let cg = pairs.iter().map(|(_, g)| g).sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in pairs {
        h += (g - cg) * (e - ce).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (u * v_t).determinant().signum();
    let rot = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    Pose::new(rot, cg - rot * ce)
}

/// Translational RMSE after the best rigid alignment of the estimate onto the
/// ground truth.
pub fn ate_rmse(estimate: &Trajectory, ground_truth: &Trajectory) -> Result<f64, IoError> {
    let pairs = associate(estimate, ground_truth);
    if pairs.len() < 2 {
        return Err(IoError::NoOverlap { pairs: pairs.len() });
    }
    let t = align_rigid(&pairs);
    let se: f64 = pairs.iter().map(|(e, g)| (g - t.transform(e)).norm_squared()).sum();
    Ok((se / pairs.len() as f64).sqrt())
}
