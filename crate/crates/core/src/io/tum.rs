use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion};

use super::{IoError, Trajectory};
use crate::geometry::{Pose, Vec3};

/// `%.9g`-style formatting: 9 significant digits, trailing zeros removed,
/// exponent form outside `[1e-5, 1e9)`. Negative zero prints as `0`.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn quaternion_of(pose: &Pose) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(pose.rotation));
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// One line per pose, `timestamp tx ty tz qx qy qz qw`, LF-terminated. The
/// quaternion is written with `qw ≥ 0`.
pub fn write_trajectory_tum(traj: &Trajectory, path: &Path) -> Result<(), IoError> {
    let mut s = String::new();
    for (t, pose) in traj.entries() {
        let q = quaternion_of(pose);
        let tr = pose.translation;
        let _ = writeln!(
            s,
            "{t:.8} {} {} {} {} {} {} {}",
            format_g9(tr.x),
            format_g9(tr.y),
            format_g9(tr.z),
            format_g9(q.i),
            format_g9(q.j),
            format_g9(q.k),
            format_g9(q.w)
        );
    }
    std::fs::write(path, s).map_err(|e| IoError::io(path, e))
}

/// Parse a TUM trajectory. Blank lines and `#` comments are skipped.
pub fn read_trajectory_tum(path: &Path) -> Result<Trajectory, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut traj = Trajectory::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| IoError::malformed(path, format!("line {}: bad number", lineno + 1)))?;
        if vals.len() != 8 {
            return Err(IoError::malformed(path, format!("line {}: expected 8 fields, got {}", lineno + 1, vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-9 {
            return Err(IoError::malformed(path, format!("line {}: zero quaternion", lineno + 1)));
        }
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        let pose = Pose::new(rot, Vec3::new(vals[1], vals[2], vals[3]));
        traj.push(vals[0], pose).map_err(|e| IoError::malformed(path, format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(traj)
}
