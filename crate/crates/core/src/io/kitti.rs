use std::path::Path;

use super::IoError;
use crate::geometry::Vec3;

/// Read a KITTI velodyne scan: little-endian `f32` quadruples `(x, y, z, intensity)`.
pub fn read_scan_kitti_bin(path: &Path) -> Result<Vec<(Vec3, f32)>, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(IoError::malformed(path, format!("{} bytes is not a multiple of 16", bytes.len())));
    }
    let mut out = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4-byte slice"));
        let vals = [f(0), f(1), f(2), f(3)];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(IoError::malformed(path, format!("non-finite value in point {i}")));
        }
        out.push((Vec3::new(vals[0] as f64, vals[1] as f64, vals[2] as f64), vals[3]));
    }
    Ok(out)
}

pub fn write_scan_kitti_bin(path: &Path, points: &[(Vec3, f32)]) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for (p, intensity) in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, *intensity] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}
