//! Spatial hash of low-resolution voxels, each holding an adaptive octree of
//! probabilistic planes, bounded by a least-recently-used cache.

mod octree;

use std::num::NonZeroUsize;
use std::sync::Mutex;
use std::time::Instant;

use lru::LruCache;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use octree::{build_octree, incremental_update, MapTimings, NodeGeometry, OctreeNode, PointList};

use crate::geometry::{Vec3, WorldPoint};
use crate::plane::{Plane, DEFAULT_SEED};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("no plane on the octree path of the point")]
    NoPlane,
    #[error("invalid map configuration: {0}")]
    InvalidConfig(String),
}

/// Parameters of map construction and maintenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    /// Edge length of a root voxel, m.
    pub voxel_size: f64,
    /// Deepest node depth that may still be subdivided (root = 0).
    pub max_depth: u32,
    /// RANSAC inlier distance `d_th`, m.
    pub distance_threshold: f64,
    /// Minimum inlier ratio `p_th`, checked with a strict `>`.
    pub inlier_ratio: f64,
    /// RANSAC hypotheses per node `K`.
    pub ransac_iterations: usize,
    /// Minimum points `N_min` for a node to be fitted.
    pub min_points: usize,
    /// Planarity threshold on the smallest eigenvalue `λ_th`, m².
    pub planarity_threshold: f64,
    /// Grid divisor `n`: the distribution check bins at `voxel_size / n`.
    pub grid_divisor: u32,
    /// Maximum number of resident voxels.
    pub lru_capacity: usize,
    /// A built voxel is reconstructed once it has received
    /// `max(rebuild_point_threshold, points at last build)` new points.
    pub rebuild_point_threshold: usize,
    /// Plane covariance is frozen once its trace drops below this, m².
    pub converged_cov_trace: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 3.0,
            max_depth: 4,
            distance_threshold: 0.05,
            inlier_ratio: 0.5,
            ransac_iterations: 20,
            min_points: 10,
            planarity_threshold: 0.01,
            grid_divisor: 8,
            lru_capacity: 100_000,
            rebuild_point_threshold: 10,
            converged_cov_trace: 1e-6,
            seed: DEFAULT_SEED,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("distance_threshold", self.distance_threshold),
            ("planarity_threshold", self.planarity_threshold),
            ("converged_cov_trace", self.converged_cov_trace),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(MapError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.inlier_ratio > 0.0 && self.inlier_ratio <= 1.0) {
            return Err(MapError::InvalidConfig(format!(
                "inlier_ratio must lie in (0, 1], got {}",
                self.inlier_ratio
            )));
        }
        let counts = [
            ("max_depth", self.max_depth as usize),
            ("ransac_iterations", self.ransac_iterations),
            ("min_points", self.min_points),
            ("grid_divisor", self.grid_divisor as usize),
            ("lru_capacity", self.lru_capacity),
            ("rebuild_point_threshold", self.rebuild_point_threshold),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MapError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Integer lattice coordinates of a root voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    pub fn of(p: &Vec3, voxel_size: f64) -> Self {
        Self::new(
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        )
    }

    pub fn root_geometry(&self, voxel_size: f64) -> NodeGeometry {
        let half = voxel_size * 0.5;
        NodeGeometry {
            depth: 0,
            center: Vec3::new(self.ix as f64, self.iy as f64, self.iz as f64) * voxel_size + Vec3::repeat(half),
            half_size: half,
        }
    }

    /// Deterministic per-voxel RNG seed.
    fn rng_seed(&self, seed: u64) -> u64 {
        let mut h = splitmix64(seed);
        for c in [self.ix, self.iy, self.iz] {
            h = splitmix64(h ^ c as u64);
        }
        h
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One resident root voxel. Until `min_points` points have arrived the voxel
/// is unbuilt and its points wait in the root's non-plane list.
#[derive(Debug, Clone)]
pub struct Voxel {
    root: OctreeNode,
    built: bool,
    points_at_build: usize,
    new_points: usize,
}

impl Voxel {
    pub fn root(&self) -> &OctreeNode {
        &self.root
    }

    pub fn is_built(&self) -> bool {
        self.built
    }

    pub fn points_since_build(&self) -> usize {
        self.new_points
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MapStats {
    /// First-time octree constructions.
    pub builds: usize,
    /// Reconstructions of already built voxels.
    pub rebuilds: usize,
    /// Planes created by constructions and reconstructions.
    pub planes_built: usize,
    pub evictions: usize,
    pub timings: MapTimings,
}

/// Plane count and per-node point counts; equal summaries mean equal maps up
/// to floating-point content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapSummary {
    pub voxels: usize,
    pub planes: usize,
    pub points: usize,
    /// `(key, depth, plane point count, non-plane point count)`, sorted.
    pub nodes: Vec<(VoxelKey, u32, usize, usize)>,
}

pub struct VoxelMap {
    config: MapConfig,
    voxels: LruCache<VoxelKey, Voxel>,
    pending_touches: Mutex<Vec<VoxelKey>>,
    stats: MapStats,
}

impl std::fmt::Debug for VoxelMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VoxelMap")
            .field("config", &self.config)
            .field("voxels", &self.voxels.len())
            .field("stats", &self.stats)
            .finish()
    }
}

impl VoxelMap {
    pub fn new(config: MapConfig) -> Result<Self, MapError> {
        config.validate()?;
        let capacity = NonZeroUsize::new(config.lru_capacity).expect("validated");
        Ok(Self {
            config,
            voxels: LruCache::new(capacity),
            pending_touches: Mutex::new(Vec::new()),
            stats: MapStats::default(),
        })
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn stats(&self) -> &MapStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        VoxelKey::of(p, self.config.voxel_size)
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.voxels.contains(key)
    }

    /// Read access without touching the recency order.
    pub fn voxel(&self, key: &VoxelKey) -> Option<&Voxel> {
        self.voxels.peek(key)
    }

    /// Resident keys, most recently used first. Pending query touches are not
    /// reflected until the next write or [`VoxelMap::flush_touches`].
    pub fn keys_by_recency(&self) -> Vec<VoxelKey> {
        self.voxels.iter().map(|(k, _)| *k).collect()
    }

    pub fn voxels(&self) -> impl Iterator<Item = (&VoxelKey, &Voxel)> {
        self.voxels.iter()
    }

    /// All planes with their voxel key and node depth, sorted by key then
    /// pre-order position.
    pub fn planes(&self) -> Vec<(VoxelKey, u32, &Plane)> {
        let mut keys: Vec<&VoxelKey> = self.voxels.iter().map(|(k, _)| k).collect();
        keys.sort();
        let mut out = Vec::new();
        for key in keys {
            let voxel = self.voxels.peek(key).expect("resident");
            voxel.root.visit(&mut |n| {
                if let Some(p) = n.plane() {
                    out.push((*key, n.geometry().depth, p));
                }
            });
        }
        out
    }

    pub fn summary(&self) -> MapSummary {
        let mut nodes = Vec::new();
        let mut planes = 0;
        let mut points = 0;
        for (key, voxel) in self.voxels.iter() {
            voxel.root.visit(&mut |n| {
                planes += n.plane().is_some() as usize;
                points += n.plane_points().len() + n.non_plane_points().len();
                nodes.push((*key, n.geometry().depth, n.plane_points().len(), n.non_plane_points().len()));
            });
        }
        nodes.sort();
        MapSummary {
            voxels: self.voxels.len(),
            planes,
            points,
            nodes,
        }
    }

    /// Planes of the voxel containing `p`, in pre-order. Marks the voxel as
    /// recently used; the touch is applied at the next write.
    pub fn query_candidate_planes(&self, p: &Vec3) -> Vec<&Plane> {
        let key = self.key_of(p);
        match self.voxels.peek(&key) {
            Some(voxel) => {
                self.pending_touches.lock().expect("touch list poisoned").push(key);
                voxel.root.planes()
            }
            None => Vec::new(),
        }
    }

    /// Same as [`VoxelMap::query_candidate_planes`] without recording a touch.
    pub fn candidate_planes_untracked(&self, p: &Vec3) -> Vec<&Plane> {
        self.voxels
            .peek(&self.key_of(p))
            .map(|v| v.root.planes())
            .unwrap_or_default()
    }

    /// Record a use of `key` without querying it; applied at the next write.
    pub fn touch(&self, key: VoxelKey) {
        if self.voxels.contains(&key) {
            self.pending_touches.lock().expect("touch list poisoned").push(key);
        }
    }

    /// Apply deferred query touches in the order they were recorded.
    pub fn flush_touches(&mut self) {
        let pending = std::mem::take(self.pending_touches.get_mut().expect("touch list poisoned"));
        for key in pending {
            self.voxels.promote(&key);
        }
    }

    /// Insert world points. New voxels are built once they hold `min_points`
    /// points; points for built voxels go through [`incremental_update`] and
    /// trigger a reconstruction when enough have accumulated. Every touched
    /// voxel moves to the front of the LRU queue, evicting from the back.
    pub fn insert_scan(&mut self, points: &[WorldPoint]) {
        self.flush_touches();
        let mut order: Vec<VoxelKey> = Vec::new();
        let mut buckets: std::collections::HashMap<VoxelKey, Vec<WorldPoint>> = Default::default();
        for p in points {
            let key = self.key_of(&p.position);
            buckets
                .entry(key)
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(*p);
        }
        for key in order {
            let pts = buckets.remove(&key).expect("bucketed");
            if !self.voxels.contains(&key) {
                let voxel = Voxel {
                    root: OctreeNode::empty(key.root_geometry(self.config.voxel_size)),
                    built: false,
                    points_at_build: 0,
                    new_points: 0,
                };
                if self.voxels.push(key, voxel).is_some() {
                    self.stats.evictions += 1;
                }
            }
            let voxel = self.voxels.get_mut(&key).expect("just ensured");
            let rebuild = absorb_points(voxel, pts, &self.config, &mut self.stats.timings);
            if rebuild {
                let voxel = self.voxels.peek_mut(&key).expect("resident");
                rebuild_voxel(voxel, key, &self.config, &mut self.stats);
            }
        }
    }

    /// Rebuild the octree of `key` from all of its points. Returns `false` if
    /// the voxel is not resident.
    pub fn reconstruct_octree(&mut self, key: &VoxelKey) -> bool {
        self.flush_touches();
        match self.voxels.get_mut(key) {
            Some(voxel) => {
                rebuild_voxel(voxel, *key, &self.config, &mut self.stats);
                true
            }
            None => false,
        }
    }
}

/// Returns whether the voxel is due for (re)construction.
fn absorb_points(voxel: &mut Voxel, pts: Vec<WorldPoint>, cfg: &MapConfig, timings: &mut MapTimings) -> bool {
    if !voxel.built {
        for p in pts {
            voxel.root.push_unbuilt(p);
        }
        return voxel.root.non_plane_points().len() >= cfg.min_points;
    }
    let t = Instant::now();
    for p in pts {
        if let Err(MapError::NoPlane) = incremental_update(&mut voxel.root, p, cfg) {
            voxel.root.store_non_plane(p);
        }
        voxel.new_points += 1;
    }
    timings.plane_update += t.elapsed();
    voxel.new_points >= cfg.rebuild_point_threshold.max(voxel.points_at_build)
}

fn rebuild_voxel(voxel: &mut Voxel, key: VoxelKey, cfg: &MapConfig, stats: &mut MapStats) {
    let geometry = key.root_geometry(cfg.voxel_size);
    let old = std::mem::replace(&mut voxel.root, OctreeNode::empty(geometry));
    let points = old.into_points();
    let count = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(key.rng_seed(cfg.seed));
    voxel.root = build_octree(points, geometry, cfg, &mut rng, &mut stats.timings);
    if voxel.built {
        stats.rebuilds += 1;
    } else {
        stats.builds += 1;
    }
    stats.planes_built += voxel.root.planes().len();
    voxel.built = true;
    voxel.points_at_build = count;
    voxel.new_points = 0;
}

#[cfg(test)]
mod tests;
