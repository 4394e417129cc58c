use std::fmt::Write as _;
use std::path::Path;

use super::IoError;
use crate::geometry::Vec3;
use crate::plane::Plane;
use crate::voxel_map::VoxelMap;

struct Element {
    name: String,
    count: usize,
    properties: Vec<String>,
    has_list: bool,
}

/// Read the vertex positions of an ASCII PLY file. Vertex properties other
/// than `x`, `y`, `z` are ignored, as are rows of other elements.
pub fn read_scan_ply_ascii(path: &Path) -> Result<Vec<Vec3>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let bad = |reason: String| IoError::malformed(path, reason);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' magic".into()));
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    loop {
        let line = lines.next().ok_or_else(|| bad("header has no end_header".into()))?.trim();
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format_ok = true,
            ["format", other, ..] => return Err(bad(format!("unsupported format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad(format!("bad element count '{count}'")))?,
                properties: Vec::new(),
                has_list: false,
            }),
            ["property", "list", _, _, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element".into()))?;
                el.properties.push(name.to_string());
                el.has_list = true;
            }
            ["property", _, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element".into()))?;
                el.properties.push(name.to_string());
            }
            _ => return Err(bad(format!("unrecognised header line '{line}'"))),
        }
    }
    if !format_ok {
        return Err(bad("missing format line".into()));
    }

    let mut rows = lines.filter(|l| !l.trim().is_empty());
    let mut points = Vec::new();
    for el in &elements {
        if el.name != "vertex" {
            for k in 0..el.count {
                rows.next().ok_or_else(|| bad(format!("element '{}' has {k} of {} rows", el.name, el.count)))?;
            }
            continue;
        }
        if el.has_list {
            return Err(bad("list properties on vertices are not supported".into()));
        }
        let idx = |axis: &str| {
            el.properties
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| bad(format!("vertex has no '{axis}' property")))
        };
        let (ix, iy, iz) = (idx("x")?, idx("y")?, idx("z")?);
        for k in 0..el.count {
            let row = rows.next().ok_or_else(|| bad(format!("header declares {} vertices, found {k}", el.count)))?;
            let vals: Vec<&str> = row.split_whitespace().collect();
            if vals.len() != el.properties.len() {
                return Err(bad(format!("vertex {k} has {} values, expected {}", vals.len(), el.properties.len())));
            }
            let num = |i: usize| -> Result<f64, IoError> {
                vals[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("vertex {k}: bad number '{}'", vals[i])))
            };
            points.push(Vec3::new(num(ix)?, num(iy)?, num(iz)?));
        }
    }
    if rows.next().is_some() {
        return Err(bad("more rows than declared".into()));
    }
    Ok(points)
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub fn write_points_ply(path: &Path, points: &[Vec3]) -> Result<(), IoError> {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    write_text(path, &s)
}

/// Rectangle covering a plane's points: `q ± √(3λ₁)·u₁ ± √(3λ₂)·u₂`, the
/// extent of a uniform patch with the plane's in-plane variances.
pub fn plane_quad(plane: &Plane) -> [Vec3; 4] {
    let ev = plane.eigenvalues();
    let a = plane.fit().axis(0) * (3.0 * ev[0]).sqrt();
    let b = plane.fit().axis(1) * (3.0 * ev[1]).sqrt();
    let q = plane.centroid();
    [q - a - b, q + a - b, q + a + b, q - a + b]
}

/// Export the map: one quad face per plane, followed by every stored point as
/// a bare vertex. Vertices carry the octree depth of their plane (-1 for raw points).
pub fn write_map_ply(path: &Path, map: &VoxelMap) -> Result<(), IoError> {
    let planes = map.planes();
    let mut raw = Vec::new();
    for (_, voxel) in map.voxels() {
        voxel.root().visit(&mut |n| {
            raw.extend(n.plane_points().iter().chain(n.non_plane_points()).map(|p| p.position));
        });
    }
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\ncomment voxel map export\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty int depth\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        4 * planes.len() + raw.len(),
        planes.len()
    );
    for (_, depth, plane) in &planes {
        for v in plane_quad(plane) {
            let _ = writeln!(s, "{} {} {} {}", v.x, v.y, v.z, depth);
        }
    }
    for p in &raw {
        let _ = writeln!(s, "{} {} {} -1", p.x, p.y, p.z);
    }
    for i in 0..planes.len() {
        let b = 4 * i;
        let _ = writeln!(s, "4 {} {} {} {}", b, b + 1, b + 2, b + 3);
    }
    write_text(path, &s)
}
