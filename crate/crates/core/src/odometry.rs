//! Scan-to-map LiDAR odometry: constant-velocity prediction, probabilistic
//! point-to-plane matching and an iterated MAP pose update.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use nalgebra::{Matrix6, RowVector6, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{skew, so3_exp, so3_log, so3_right_jacobian, Mat3, Pose, PoseCov, RangeBearingNoise, Vec3, WorldPoint};
use crate::plane::{Mat6, Plane};
use crate::voxel_map::{MapConfig, MapError, VoxelKey, VoxelMap};

/// Lower bound on a residual variance, m².
pub const SIGMA2_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdometryError {
    #[error("only {matched} of {total} points matched a plane")]
    InsufficientMatches { matched: usize, total: usize },
    #[error("timestamp {timestamp} does not follow {previous}")]
    NonMonotonicTime { previous: f64, timestamp: f64 },
    #[error("invalid odometry configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryConfig {
    /// Voxel-grid filter leaf size, m. Zero disables downsampling.
    pub downsample: f64,
    pub max_iterations: usize,
    /// Reject candidate planes farther than this, m.
    pub max_dist: f64,
    /// Reject candidates with `|d| / σ` above this.
    pub sigma_gate: f64,
    pub min_match_ratio: f64,
    /// Stop iterating once the state increment is below this norm.
    pub convergence_tol: f64,
    /// Rotation process noise, rad²/s.
    pub process_noise_rot: f64,
    /// Translation process noise, m²/s.
    pub process_noise_trans: f64,
    pub sensor_noise: RangeBearingNoise,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            downsample: 0.5,
            max_iterations: 3,
            max_dist: 0.5,
            sigma_gate: 3.0,
            min_match_ratio: 0.1,
            convergence_tol: 1e-6,
            process_noise_rot: 1e-3,
            process_noise_trans: 1e-1,
            sensor_noise: RangeBearingNoise::default(),
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        let bad = |msg: &str| Err(OdometryError::InvalidConfig(msg.into()));
        if !(self.downsample >= 0.0) {
            return bad("downsample must be non-negative");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.max_dist > 0.0) || !(self.sigma_gate > 0.0) {
            return bad("max_dist and sigma_gate must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_match_ratio) {
            return bad("min_match_ratio must be in [0, 1]");
        }
        if !(self.process_noise_rot >= 0.0) || !(self.process_noise_trans >= 0.0) {
            return bad("process noise must be non-negative");
        }
        if !(self.sensor_noise.range_sigma >= 0.0) || !(self.sensor_noise.bearing_sigma_deg >= 0.0) {
            return bad("sensor noise must be non-negative");
        }
        Ok(())
    }

    fn process_noise(&self) -> Mat6 {
        let mut q = Mat6::zeros();
        for i in 0..3 {
            q[(i, i)] = self.process_noise_rot;
            q[(i + 3, i + 3)] = self.process_noise_trans;
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryState {
    pub pose: Pose,
    /// World-frame linear velocity, m/s.
    pub linear_velocity: Vec3,
    /// Body-frame angular velocity, rad/s.
    pub angular_velocity: Vec3,
    /// Covariance of the right-perturbation error `(δθ, δt)`.
    pub state_cov: Mat6,
}

impl Default for OdometryState {
    fn default() -> Self {
        Self {
            pose: Pose::identity(),
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
            state_cov: Mat6::zeros(),
        }
    }
}

impl OdometryState {
    pub fn pose_cov(&self) -> PoseCov {
        PoseCov {
            rot_cov: self.state_cov.fixed_view::<3, 3>(0, 0).into_owned(),
            trans_cov: self.state_cov.fixed_view::<3, 3>(3, 3).into_owned(),
        }
    }
}

/// Constant-velocity prediction over `dt` seconds, inflating the covariance by `Q·dt`.
pub fn predict(state: &OdometryState, dt: f64, cfg: &OdometryConfig) -> OdometryState {
    assert!(dt > 0.0, "prediction step must be positive");
    let pose = Pose::new(
        state.pose.rotation * so3_exp(&(state.angular_velocity * dt)),
        state.pose.translation + state.linear_velocity * dt,
    );
    OdometryState {
        pose: tidy(pose),
        state_cov: state.state_cov + cfg.process_noise() * dt,
        ..*state
    }
}

/// A scan point associated with a map plane.
#[derive(Debug, Clone, Copy)]
pub struct PointMatch<'a> {
    pub index: usize,
    pub plane: &'a Plane,
    /// Signed point-to-plane distance `nᵀ(p − q)`, m.
    pub residual: f64,
    pub sigma2: f64,
    /// Gaussian density of the residual.
    pub probability: f64,
}

/// Variance of `d = nᵀ(p − q)` from the plane covariance and the point
/// covariance with `J = [(p − q)ᵀ, −nᵀ, nᵀ]`, floored at [`SIGMA2_FLOOR`].
pub fn residual_sigma(plane_cov: &Mat6, point_cov: &Mat3, normal: &Vec3, centroid: &Vec3, point: &Vec3) -> f64 {
    let j_nq = RowVector6::new(
        point.x - centroid.x,
        point.y - centroid.y,
        point.z - centroid.z,
        -normal.x,
        -normal.y,
        -normal.z,
    );
    let plane_part = (j_nq * plane_cov * j_nq.transpose())[0];
    let point_part = (normal.transpose() * point_cov * normal)[0];
    plane_part + point_part + SIGMA2_FLOOR
}

/// `exp(−d²/2σ²) / (σ√(2π))`.
pub fn match_probability(residual: f64, sigma2: f64) -> f64 {
    let sigma = sigma2.sqrt();
    1.0 / (sigma * std::f64::consts::TAU.sqrt()) * (-residual * residual / (2.0 * sigma2)).exp()
}

/// Best plane for `wp` among `candidates` after the distance and sigma gates.
/// Ties keep the earlier candidate.
pub fn select_plane<'a>(candidates: &[&'a Plane], wp: &WorldPoint, max_dist: f64, sigma_gate: f64) -> Option<PointMatch<'a>> {
    let mut best: Option<PointMatch<'a>> = None;
    for &plane in candidates {
        let normal = plane.normal();
        let centroid = plane.centroid();
        let d = normal.dot(&(wp.position - centroid));
        if d.abs() > max_dist {
            continue;
        }
        let sigma2 = residual_sigma(plane.param_cov(), &wp.cov, &normal, &centroid, &wp.position);
        if d * d > sigma_gate * sigma_gate * sigma2 {
            continue;
        }
        let probability = match_probability(d, sigma2);
        if best.as_ref().is_none_or(|b| probability > b.probability) {
            best = Some(PointMatch {
                index: 0,
                plane,
                residual: d,
                sigma2,
                probability,
            });
        }
    }
    best
}

/// Match a world point against the planes of its voxel. Counts as a use of
/// that voxel for LRU purposes.
pub fn match_point<'a>(map: &'a VoxelMap, wp: &WorldPoint, max_dist: f64, sigma_gate: f64) -> Option<PointMatch<'a>> {
    select_plane(&map.query_candidate_planes(&wp.position), wp, max_dist, sigma_gate)
}

/// Derivative of `nᵀ(R·p_l + t − q)` with respect to the right perturbation
/// `(δθ, δt)` of `pose`: `[nᵀ(−R⌊p_l⌋), nᵀ]`.
pub fn residual_pose_jacobian(pose: &Pose, lidar_point: &Vec3, normal: &Vec3) -> RowVector6<f64> {
    let rot = -(normal.transpose() * pose.rotation * skew(lidar_point));
    RowVector6::new(rot[0], rot[1], rot[2], normal.x, normal.y, normal.z)
}

/// One linearized measurement: residual, its variance, and the Jacobian with
/// respect to the state increment.
#[derive(Debug, Clone, Copy)]
pub struct Measurement {
    pub residual: f64,
    pub sigma2: f64,
    pub jacobian: RowVector6<f64>,
}

/// MAP estimate of the error state `ε` (relative to the prior mean) for
/// linearized measurements taken at `ε = current`:
/// `ε = (I + P M)⁻¹ P (M·current − g)`, `M = Σ JᵀJ/σ²`, `g = Σ Jᵀd/σ²`.
/// Returns `ε` and the posterior covariance `(I + P M)⁻¹ P`.
///
/// The prior covariance is never inverted, so `P = 0` and an empty
/// measurement set both return `ε = 0` exactly.
pub fn map_step(prior_cov: &Mat6, current: &Vector6<f64>, measurements: &[Measurement]) -> (Vector6<f64>, Mat6) {
    let mut info = Mat6::zeros();
    let mut grad = Vector6::zeros();
    for m in measurements {
        let w = 1.0 / m.sigma2;
        let jt = m.jacobian.transpose();
        info += jt * m.jacobian * w;
        grad += jt * (m.residual * w);
    }
    let system = Mat6::identity() + prior_cov * info;
    let lu = system.lu();
    let rhs = prior_cov * (info * current - grad);
    let eps = lu.solve(&rhs).unwrap_or_else(Vector6::zeros);
    let post = lu.solve(prior_cov).unwrap_or(*prior_cov);
    (eps, 0.5 * (post + post.transpose()))
}

fn apply_error(prior: &Pose, eps: &Vector6<f64>) -> Pose {
    let rot = Vec3::new(eps[0], eps[1], eps[2]);
    let trans = Vec3::new(eps[3], eps[4], eps[5]);
    tidy(prior.perturbed(&rot, &trans))
}

/// Re-project onto SO(3) only once drift is measurable, so exact inputs stay exact.
fn tidy(pose: Pose) -> Pose {
    if pose.orthonormality_error() > 1e-12 {
        pose.renormalized()
    } else {
        pose
    }
}

/// Summary of one [`update`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub iterations: usize,
    pub matched: usize,
    pub total: usize,
    pub converged: bool,
    /// Norm of the last state increment.
    pub last_step: f64,
}

impl UpdateReport {
    pub fn match_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// A sensor-frame point with its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub position: Vec3,
    pub cov: Mat3,
}

fn match_scan<'a>(
    map: &'a VoxelMap,
    scan: &[ScanPoint],
    pose: &Pose,
    pose_cov: &PoseCov,
    cfg: &OdometryConfig,
) -> Vec<PointMatch<'a>> {
    scan.par_iter()
        .enumerate()
        .filter_map(|(i, sp)| {
            let wp = crate::geometry::transform_point(&sp.position, &sp.cov, pose, pose_cov);
            let candidates = map.candidate_planes_untracked(&wp.position);
            select_plane(&candidates, &wp, cfg.max_dist, cfg.sigma_gate).map(|m| PointMatch { index: i, ..m })
        })
        .collect()
}

/// Iterated MAP update of `prior` against the map. Points are re-matched at
/// every iterate; the map is only read. Gating and plane selection use point
/// covariances that include the pose uncertainty of the current iterate (the
/// prior covariance first, then the running posterior); the solve weights use
/// the sensor noise alone, since the prior already carries the pose term. Fails with
/// [`OdometryError::InsufficientMatches`] if fewer than
/// `min_match_ratio` of the points match at any iterate.
pub fn update(
    prior: &OdometryState,
    scan: &[ScanPoint],
    map: &VoxelMap,
    cfg: &OdometryConfig,
) -> Result<(OdometryState, UpdateReport), OdometryError> {
    let mut eps = Vector6::zeros();
    let mut pose = prior.pose;
    let mut post_cov = prior.state_cov;
    let mut report = UpdateReport {
        iterations: 0,
        matched: 0,
        total: scan.len(),
        converged: false,
        last_step: f64::INFINITY,
    };
    let mut used_keys: Vec<VoxelKey> = Vec::new();
    for _ in 0..cfg.max_iterations {
        let gate_cov = OdometryState {
            state_cov: post_cov,
            ..*prior
        }
        .pose_cov();
        let matches = match_scan(map, scan, &pose, &gate_cov, cfg);
        report.matched = matches.len();
        report.iterations += 1;
        let enough = !scan.is_empty() && matches.len() as f64 >= cfg.min_match_ratio * scan.len() as f64;
        if !enough || matches.is_empty() {
            return Err(OdometryError::InsufficientMatches {
                matched: matches.len(),
                total: scan.len(),
            });
        }
        let jr = so3_right_jacobian(&Vec3::new(eps[0], eps[1], eps[2]));
        let mut chain = Matrix6::identity();
        chain.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr);
        let measurements: Vec<Measurement> = matches
            .iter()
            .map(|m| {
                let sp = &scan[m.index];
                let normal = m.plane.normal();
                let world = pose.transform(&sp.position);
                let sensor_cov = pose.rotation * sp.cov * pose.rotation.transpose();
                Measurement {
                    residual: m.residual,
                    sigma2: residual_sigma(m.plane.param_cov(), &sensor_cov, &normal, &m.plane.centroid(), &world),
                    jacobian: residual_pose_jacobian(&pose, &sp.position, &normal) * chain,
                }
            })
            .collect();
        let (next, cov) = map_step(&prior.state_cov, &eps, &measurements);
        report.last_step = (next - eps).norm();
        eps = next;
        pose = apply_error(&prior.pose, &eps);
        post_cov = cov;
        used_keys = matches.iter().map(|m| map.key_of(&(pose.transform(&scan[m.index].position)))).collect();
        if report.last_step < cfg.convergence_tol {
            report.converged = true;
            break;
        }
    }
    let mut seen = std::collections::HashSet::new();
    for key in used_keys {
        if seen.insert(key) {
            map.touch(key);
        }
    }
    let state = OdometryState {
        pose,
        state_cov: post_cov,
        ..*prior
    };
    Ok((state, report))
}

/// Voxel-grid filter: one centroid per occupied cell of size `leaf`, in
/// order of first occupancy. `leaf <= 0` returns the input.
pub fn voxel_downsample(points: &[Vec3], leaf: f64) -> Vec<Vec3> {
    if !(leaf > 0.0) {
        return points.to_vec();
    }
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    for p in points {
        let cell = [
            (p.x / leaf).floor() as i64,
            (p.y / leaf).floor() as i64,
            (p.z / leaf).floor() as i64,
        ];
        let slot = *index.entry(cell).or_insert_with(|| {
            sums.push((Vec3::zeros(), 0));
            sums.len() - 1
        });
        sums[slot].0 += p;
        sums[slot].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n as f64).collect()
}

/// Per-stage wall-clock time accumulated by [`Odometry`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PipelineTimings {
    pub downsample: Duration,
    pub state_update: Duration,
    pub ransac: Duration,
    pub plane_check: Duration,
    pub plane_update: Duration,
    pub map_other: Duration,
    pub total: Duration,
}

impl PipelineTimings {
    pub fn categories(&self) -> [(&'static str, Duration); 6] {
        [
            ("downsample", self.downsample),
            ("state update", self.state_update),
            ("RANSAC", self.ransac),
            ("plane check", self.plane_check),
            ("plane param update", self.plane_update),
            ("map other", self.map_other),
        ]
    }

    pub fn category_sum(&self) -> Duration {
        self.categories().iter().map(|(_, d)| *d).sum()
    }
}

/// Outcome of [`Odometry::process_scan`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub pose: Pose,
    /// `None` for the first scan, which only seeds the map.
    pub report: Option<UpdateReport>,
    /// Set when the update failed and the predicted pose was kept.
    pub warning: Option<OdometryError>,
    pub points_used: usize,
}

/// The complete pipeline: downsample, predict, update, insert.
#[derive(Debug)]
pub struct Odometry {
    config: OdometryConfig,
    map: VoxelMap,
    state: OdometryState,
    last: Option<(f64, Pose)>,
    trajectory: Vec<(f64, Pose)>,
    timings: PipelineTimings,
}

impl Odometry {
    pub fn new(map_config: MapConfig, config: OdometryConfig) -> Result<Self, OdometryError> {
        config.validate()?;
        Ok(Self {
            map: VoxelMap::new(map_config)?,
            config,
            state: OdometryState::default(),
            last: None,
            trajectory: Vec::new(),
            timings: PipelineTimings::default(),
        })
    }

    pub fn with_initial_state(mut self, state: OdometryState) -> Self {
        self.state = state;
        self
    }

    pub fn config(&self) -> &OdometryConfig {
        &self.config
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn state(&self) -> &OdometryState {
        &self.state
    }

    pub fn trajectory(&self) -> &[(f64, Pose)] {
        &self.trajectory
    }

    pub fn timings(&self) -> &PipelineTimings {
        &self.timings
    }

    /// Process one sensor-frame scan taken at `timestamp` seconds.
    pub fn process_scan(&mut self, raw: &[Vec3], timestamp: f64) -> Result<ScanOutcome, OdometryError> {
        if let Some((previous, _)) = self.last {
            if !(timestamp > previous) {
                return Err(OdometryError::NonMonotonicTime { previous, timestamp });
            }
        }
        let start = Instant::now();

        let t = Instant::now();
        let points = voxel_downsample(raw, self.config.downsample);
        let scan: Vec<ScanPoint> = points
            .iter()
            .map(|p| ScanPoint {
                position: *p,
                cov: self.config.sensor_noise.covariance(p),
            })
            .collect();
        self.timings.downsample += t.elapsed();

        let t = Instant::now();
        let mut report = None;
        let mut warning = None;
        if let Some((previous, _)) = self.last {
            let predicted = predict(&self.state, timestamp - previous, &self.config);
            if self.map.is_empty() {
                self.state = predicted;
            } else {
                match update(&predicted, &scan, &self.map, &self.config) {
                    Ok((state, r)) => {
                        self.state = state;
                        report = Some(r);
                    }
                    Err(e) => {
                        log::warn!("scan at {timestamp:.3}: {e}; keeping the predicted pose");
                        self.state = predicted;
                        warning = Some(e);
                    }
                }
            }
            let dt = timestamp - previous;
            let prev_pose = self.last.map(|(_, p)| p).expect("checked");
            self.state.linear_velocity = (self.state.pose.translation - prev_pose.translation) / dt;
            self.state.angular_velocity = so3_log(&(prev_pose.rotation.transpose() * self.state.pose.rotation)) / dt;
        }
        self.timings.state_update += t.elapsed();

        let t = Instant::now();
        let before = self.map.stats().timings;
        let pose_cov = self.state.pose_cov();
        let world: Vec<WorldPoint> = scan
            .iter()
            .map(|sp| crate::geometry::transform_point(&sp.position, &sp.cov, &self.state.pose, &pose_cov))
            .collect();
        self.map.insert_scan(&world);
        let after = self.map.stats().timings;
        let insert = t.elapsed();
        let ransac = after.ransac - before.ransac;
        let check = after.plane_check - before.plane_check;
        let plane_update = after.plane_update - before.plane_update;
        self.timings.ransac += ransac;
        self.timings.plane_check += check;
        self.timings.plane_update += plane_update;
        self.timings.map_other += insert.saturating_sub(ransac + check + plane_update);

        let pose = self.state.pose;
        self.last = Some((timestamp, pose));
        self.trajectory.push((timestamp, pose));
        self.timings.total += start.elapsed();
        if let Some(r) = &report {
            log::debug!(
                "scan at {timestamp:.3}: {}/{} matched, {} iterations, step {:.2e}",
                r.matched,
                r.total,
                r.iterations,
                r.last_step
            );
        }
        Ok(ScanOutcome {
            pose,
            report,
            warning,
            points_used: scan.len(),
        })
    }
}
