//! Ground-truth scenes made of planar polygons, a ring LiDAR ray caster with
//! labeled returns, and simple trajectories.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("no plane of the scene is hit by any ray")]
    EmptyScene,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Planar convex polygon `{x : nᵀx = offset}` bounded by `polygon`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlane {
    pub normal: Vec3,
    pub offset: f64,
    /// Convex polygon vertices in order, lying on the plane.
    pub polygon: Vec<Vec3>,
}

impl ScenePlane {
    pub fn new(normal: Vec3, offset: f64, polygon: Vec<Vec3>) -> Result<Self, SceneError> {
        if (normal.norm() - 1.0).abs() > 1e-9 {
            return Err(SceneError::InvalidScene("plane normal is not unit length".into()));
        }
        if polygon.len() < 3 {
            return Err(SceneError::InvalidScene("polygon needs at least three vertices".into()));
        }
        if polygon.iter().any(|v| (normal.dot(v) - offset).abs() > 1e-9) {
            return Err(SceneError::InvalidScene("polygon vertex off its plane".into()));
        }
        Ok(Self {
            normal,
            offset,
            polygon,
        })
    }

    /// Rectangle with corners `center ± half_u ± half_v`; `half_u` and
    /// `half_v` must be orthogonal.
    pub fn rectangle(center: Vec3, half_u: Vec3, half_v: Vec3) -> Self {
        let normal = half_u.cross(&half_v).normalize();
        let polygon = vec![
            center - half_u - half_v,
            center + half_u - half_v,
            center + half_u + half_v,
            center - half_u + half_v,
        ];
        Self {
            normal,
            offset: normal.dot(&center),
            polygon,
        }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Whether a point on the plane lies inside the polygon (boundary included).
    pub fn contains(&self, p: &Vec3) -> bool {
        let k = self.polygon.len();
        let mut sign = 0.0;
        for i in 0..k {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % k];
            let s = (b - a).cross(&(p - a)).dot(&self.normal);
            if s.abs() < 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = s.signum();
            } else if s.signum() != sign {
                return false;
            }
        }
        true
    }

    /// Ray parameter of the first intersection with `origin + s·dir` in
    /// `(min_range, max_range]`.
    fn intersect(&self, origin: &Vec3, dir: &Vec3, min_range: f64, max_range: f64) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.offset - self.normal.dot(origin)) / denom;
        if s <= min_range || s > max_range {
            return None;
        }
        self.contains(&(origin + s * dir)).then_some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub planes: Vec<ScenePlane>,
    /// Fraction of returns replaced by uniform outliers, in `[0, 1)`.
    pub outlier_ratio: f64,
    /// Standard deviation of the noise along the plane normal, m.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return Err(SceneError::InvalidScene("outlier_ratio must be in [0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(SceneError::InvalidScene("noise_sigma must be finite and non-negative".into()));
        }
        for p in &self.planes {
            ScenePlane::new(p.normal, p.offset, p.polygon.clone())?;
        }
        Ok(())
    }

    /// Axis-aligned box spanned by all polygon vertices.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in self.planes.iter().flat_map(|p| &p.polygon) {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointLabel {
    /// Index into [`SceneSpec::planes`].
    Plane(usize),
    Outlier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan {
    /// Sensor-frame points.
    pub points: Vec<Vec3>,
    pub labels: Vec<PointLabel>,
    pub true_pose: Pose,
}

impl LabeledScan {
    pub fn outlier_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == PointLabel::Outlier).count()
    }
}

/// Multi-ring spinning LiDAR: `rings` elevation channels evenly spaced
/// between the two limits, rays split evenly over rings and azimuth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPattern {
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for RayPattern {
    fn default() -> Self {
        Self {
            rings: 16,
            elevation_min_deg: -30.0,
            elevation_max_deg: 30.0,
            min_range: 0.1,
            max_range: 100.0,
        }
    }
}

impl RayPattern {
    /// Unit ray directions in the sensor frame, ring by ring.
    pub fn directions(&self, rays: usize) -> Vec<Vec3> {
        let rings = self.rings.clamp(1, rays.max(1));
        let mut dirs = Vec::with_capacity(rays);
        for ring in 0..rings {
            let per_ring = rays / rings + usize::from(ring < rays % rings);
            let elev = if rings == 1 {
                0.5 * (self.elevation_min_deg + self.elevation_max_deg)
            } else {
                self.elevation_min_deg
                    + (self.elevation_max_deg - self.elevation_min_deg) * ring as f64 / (rings - 1) as f64
            }
            .to_radians();
            // Stagger rings so azimuths do not line up.
            let phase = ring as f64 * 0.37;
            for k in 0..per_ring {
                let az = std::f64::consts::TAU * (k as f64 + phase) / per_ring as f64;
                dirs.push(Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()));
            }
        }
        dirs
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pose_seed(seed: u64, pose: &Pose) -> u64 {
    pose.rotation
        .iter()
        .chain(pose.translation.iter())
        .fold(splitmix64(seed), |h, v| splitmix64(h ^ v.to_bits()))
}

/// Ray-cast the scene from `pose` with the default [`RayPattern`].
pub fn generate_scene_scan(spec: &SceneSpec, pose: &Pose, rays: usize) -> Result<LabeledScan, SceneError> {
    generate_scene_scan_with(spec, pose, rays, &RayPattern::default())
}

/// Ray-cast the scene, perturb each return along its plane normal, then
/// replace `round(outlier_ratio · hits)` returns by uniform points in the
/// scene bounding box. Rays that hit nothing produce no point. The result is
/// a pure function of `(spec, pose, rays, pattern)`.
pub fn generate_scene_scan_with(
    spec: &SceneSpec,
    pose: &Pose,
    rays: usize,
    pattern: &RayPattern,
) -> Result<LabeledScan, SceneError> {
    if rays == 0 {
        return Err(SceneError::InvalidScene("rays must be positive".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed(spec.seed, pose));
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let origin = pose.translation;

    let mut world = Vec::new();
    let mut labels = Vec::new();
    for d in pattern.directions(rays) {
        let dir = pose.rotation * d;
        let hit = spec
            .planes
            .iter()
            .enumerate()
            .filter_map(|(i, pl)| pl.intersect(&origin, &dir, pattern.min_range, pattern.max_range).map(|s| (i, s)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, s)) = hit {
            let mut x = origin + s * dir;
            if spec.noise_sigma > 0.0 {
                x += spec.planes[i].normal * noise.sample(&mut rng);
            }
            world.push(x);
            labels.push(PointLabel::Plane(i));
        }
    }
    if world.is_empty() {
        return Err(SceneError::EmptyScene);
    }

    let n_out = (spec.outlier_ratio * world.len() as f64).round() as usize;
    let (lo, hi) = spec.bounding_box();
    for idx in sample(&mut rng, world.len(), n_out).into_vec() {
        world[idx] = Vec3::from_fn(|k, _| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>());
        labels[idx] = PointLabel::Outlier;
    }

    let inv = pose.inverse();
    Ok(LabeledScan {
        points: world.iter().map(|x| inv.transform(x)).collect(),
        labels,
        true_pose: *pose,
    })
}

/// Poses at equal spacing along +x from the origin to `length`, identity
/// rotation. The first pose is the identity.
pub fn trajectory_corridor(length: f64, num_scans: usize) -> Vec<Pose> {
    assert!(num_scans >= 2, "a trajectory needs at least two poses");
    (0..num_scans)
        .map(|i| Pose::new(crate::geometry::Mat3::identity(), Vec3::new(length * i as f64 / (num_scans - 1) as f64, 0.0, 0.0)))
        .collect()
}

/// Axis-aligned box faces, optionally skipping some by index (`-x, +x, -y, +y, -z, +z`).
fn box_faces(lo: Vec3, hi: Vec3, skip: &[usize]) -> Vec<ScenePlane> {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let (ex, ey, ez) = (Vec3::x() * h.x, Vec3::y() * h.y, Vec3::z() * h.z);
    let faces = [
        ScenePlane::rectangle(c - ex, ez, ey),
        ScenePlane::rectangle(c + ex, ey, ez),
        ScenePlane::rectangle(c - ey, ex, ez),
        ScenePlane::rectangle(c + ey, ez, ex),
        ScenePlane::rectangle(c - ez, ey, ex),
        ScenePlane::rectangle(c + ez, ex, ey),
    ];
    faces
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .map(|(_, f)| f)
        .collect()
}

/// Closed box room `[lo, hi]` seen from the inside.
pub fn room_scene(lo: Vec3, hi: Vec3, outlier_ratio: f64, noise_sigma: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        planes: box_faces(lo, hi, &[]),
        outlier_ratio,
        noise_sigma,
        seed,
    }
}

/// Corridor along +x for a sensor travelling from `x = 0` to `x = length`
/// at `z = 0`: floor, ceiling, side walls, end walls, and pillars along the
/// walls every 4 m whose faces constrain motion along the corridor.
pub fn corridor_scene(length: f64, outlier_ratio: f64, noise_sigma: f64, seed: u64) -> SceneSpec {
    let (half_width, floor_z, ceil_z, margin) = (2.0, -1.2, 1.8, 6.0);
    let lo = Vec3::new(-margin, -half_width, floor_z);
    let hi = Vec3::new(length + margin, half_width, ceil_z);
    let mut planes = box_faces(lo, hi, &[]);
    let mut x0 = -margin + 2.0;
    let mut side = 1.0;
    while x0 + 0.6 < length + margin - 1.0 {
        // Pillar 0.6 m along x, protruding 0.4 m from the wall; the face
        // against the wall is hidden and omitted.
        let (y_in, y_wall) = (side * (half_width - 0.4), side * half_width);
        let plo = Vec3::new(x0, y_in.min(y_wall), floor_z);
        let phi = Vec3::new(x0 + 0.6, y_in.max(y_wall), ceil_z);
        let hidden = if side > 0.0 { 3 } else { 2 };
        planes.extend(box_faces(plo, phi, &[hidden, 4, 5]));
        x0 += 4.0;
        side = -side;
    }
    SceneSpec {
        planes,
        outlier_ratio,
        noise_sigma,
        seed,
    }
}
