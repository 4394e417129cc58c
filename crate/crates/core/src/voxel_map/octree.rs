use std::collections::LinkedList;
use std::time::{Duration, Instant};

use rand::Rng;

use super::{MapConfig, MapError};
use crate::geometry::{Vec3, WorldPoint};
use crate::plane::{fit_plane_moments, ransac_partition, Plane};
use crate::validity::plane_validity_check;

/// Point storage of a node. Lists are spliced, never copied, when a voxel is
/// gathered for reconstruction.
pub type PointList = LinkedList<WorldPoint>;

/// Wall-clock time spent in the plane-related stages of map maintenance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MapTimings {
    pub ransac: Duration,
    pub plane_check: Duration,
    /// Plane fitting, covariance propagation and incremental updates.
    pub plane_update: Duration,
}

impl MapTimings {
    pub fn total(&self) -> Duration {
        self.ransac + self.plane_check + self.plane_update
    }
}

/// Cube covered by an octree node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeGeometry {
    pub depth: u32,
    pub center: Vec3,
    pub half_size: f64,
}

impl NodeGeometry {
    /// Octant index: bit 0 for x, bit 1 for y, bit 2 for z. Coordinates equal
    /// to the center go to the upper half.
    pub fn octant_of(&self, p: &Vec3) -> usize {
        (p.x >= self.center.x) as usize | ((p.y >= self.center.y) as usize) << 1 | ((p.z >= self.center.z) as usize) << 2
    }

    pub fn child(&self, octant: usize) -> NodeGeometry {
        let q = self.half_size * 0.5;
        let sign = |bit: usize| if octant & bit != 0 { q } else { -q };
        NodeGeometry {
            depth: self.depth + 1,
            center: self.center + Vec3::new(sign(1), sign(2), sign(4)),
            half_size: q,
        }
    }

    pub fn contains(&self, p: &Vec3, slack: f64) -> bool {
        (p - self.center).iter().all(|c| c.abs() <= self.half_size + slack)
    }
}

/// Node of the adaptive octree. Any node may carry a plane and its points;
/// points that fit no plane live in `non_plane_points` of leaves.
#[derive(Debug, Clone)]
pub struct OctreeNode {
    geometry: NodeGeometry,
    plane: Option<Plane>,
    plane_points: PointList,
    non_plane_points: PointList,
    children: [Option<Box<OctreeNode>>; 8],
}

impl OctreeNode {
    pub fn empty(geometry: NodeGeometry) -> Self {
        Self {
            geometry,
            plane: None,
            plane_points: PointList::new(),
            non_plane_points: PointList::new(),
            children: Default::default(),
        }
    }

    fn leaf(geometry: NodeGeometry, points: PointList) -> Self {
        let mut node = Self::empty(geometry);
        node.non_plane_points = points;
        node
    }

    pub fn geometry(&self) -> &NodeGeometry {
        &self.geometry
    }

    pub fn plane(&self) -> Option<&Plane> {
        self.plane.as_ref()
    }

    pub fn plane_points(&self) -> &PointList {
        &self.plane_points
    }

    pub fn non_plane_points(&self) -> &PointList {
        &self.non_plane_points
    }

    pub fn child(&self, octant: usize) -> Option<&OctreeNode> {
        self.children[octant].as_deref()
    }

    pub fn children(&self) -> impl Iterator<Item = &OctreeNode> {
        self.children.iter().flatten().map(|c| &**c)
    }

    pub fn is_leaf(&self) -> bool {
        self.children.iter().all(Option::is_none)
    }

    pub(crate) fn push_unbuilt(&mut self, p: WorldPoint) {
        self.non_plane_points.push_back(p);
    }

    /// Pre-order traversal: this node, then children by octant.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a OctreeNode)) {
        f(self);
        for child in self.children() {
            child.visit(f);
        }
    }

    /// Every plane in the subtree, in pre-order.
    pub fn planes(&self) -> Vec<&Plane> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let Some(p) = &n.plane {
                out.push(p);
            }
        });
        out
    }

    pub fn point_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |n| count += n.plane_points.len() + n.non_plane_points.len());
        count
    }

    /// Splice every stored point of the subtree into one list, consuming it.
    pub fn into_points(mut self) -> PointList {
        let mut out = PointList::new();
        self.drain_into(&mut out);
        out
    }

    fn drain_into(&mut self, out: &mut PointList) {
        out.append(&mut self.plane_points);
        out.append(&mut self.non_plane_points);
        for child in self.children.iter_mut().flatten() {
            child.drain_into(out);
        }
    }

    /// Depth (relative to this node) of the plane nearest to `p` among the
    /// planes on the path from this node down to the deepest node containing `p`.
    fn nearest_plane_on_path(&self, p: &Vec3) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        let mut node = self;
        let mut level = 0;
        loop {
            if let Some(plane) = &node.plane {
                let d = plane.signed_distance(p).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((level, d));
                }
            }
            match node.child(node.geometry.octant_of(p)) {
                Some(child) => {
                    node = child;
                    level += 1;
                }
                None => return best.map(|(l, _)| l),
            }
        }
    }

    fn descend_mut(&mut self, p: &Vec3, levels: usize) -> &mut OctreeNode {
        let mut node = self;
        for _ in 0..levels {
            let o = node.geometry.octant_of(p);
            node = node.children[o].as_deref_mut().expect("path computed from existing children");
        }
        node
    }

    /// Append `p` to the non-plane set of the deepest node containing it,
    /// creating a leaf for an empty octant when that node has children.
    pub fn store_non_plane(&mut self, p: WorldPoint) {
        let mut node = self;
        loop {
            let o = node.geometry.octant_of(&p.position);
            if node.children[o].is_some() {
                node = node.children[o].as_deref_mut().unwrap();
            } else if node.is_leaf() {
                node.non_plane_points.push_back(p);
                return;
            } else {
                let mut list = PointList::new();
                list.push_back(p);
                node.children[o] = Some(Box::new(OctreeNode::leaf(node.geometry.child(o), list)));
                return;
            }
        }
    }
}

/// Fit the node's plane from `input`: RANSAC, inlier-ratio gate, eigen fit,
/// planarity gate, distribution check, final fit from the surviving cluster.
/// Returns the plane and the indices of its points, in input order.
fn extract_plane<R: Rng + ?Sized>(
    input: &[WorldPoint],
    cfg: &MapConfig,
    rng: &mut R,
    timings: &mut MapTimings,
) -> Option<(Plane, Vec<usize>)> {
    let total = input.len();
    let t = Instant::now();
    let ransac = ransac_partition(input, cfg.distance_threshold, cfg.ransac_iterations, rng);
    timings.ransac += t.elapsed();
    let ransac = ransac.ok()?;
    if ransac.inliers.len() as f64 / total as f64 <= cfg.inlier_ratio {
        return None;
    }

    let t = Instant::now();
    let inliers: Vec<WorldPoint> = ransac.inliers.iter().map(|&i| input[i]).collect();
    let fit = fit_plane_moments(inliers.iter().map(|p| &p.position));
    timings.plane_update += t.elapsed();
    if fit.lambda_min() >= cfg.planarity_threshold {
        return None;
    }

    let t = Instant::now();
    let check = plane_validity_check(&fit, &inliers, total, cfg.inlier_ratio, cfg.grid_divisor, cfg.voxel_size);
    timings.plane_check += t.elapsed();
    if check.valid.len() < 3 {
        return None;
    }

    let t = Instant::now();
    let valid: Vec<WorldPoint> = check.valid.iter().map(|&k| inliers[k]).collect();
    let plane = Plane::from_points(&valid, cfg.converged_cov_trace);
    timings.plane_update += t.elapsed();
    let plane = plane.ok()?;
    if plane.lambda_min() >= cfg.planarity_threshold {
        return None;
    }
    Some((plane, check.valid.iter().map(|&k| ransac.inliers[k]).collect()))
}

/// Recursive octree construction with outlier reuse.
///
/// The node keeps at most one plane. Points that do not belong to it are
/// split into octants while `depth <= max_depth`; octants with at least
/// `min_points` points are processed recursively, smaller ones become leaves
/// holding their points as non-plane points.
pub fn build_octree<R: Rng + ?Sized>(
    points: PointList,
    geometry: NodeGeometry,
    cfg: &MapConfig,
    rng: &mut R,
    timings: &mut MapTimings,
) -> OctreeNode {
    let mut node = OctreeNode::empty(geometry);
    let input: Vec<WorldPoint> = points.into_iter().collect();
    if input.is_empty() {
        return node;
    }

    let mut outliers: Vec<WorldPoint> = Vec::new();
    match extract_plane(&input, cfg, rng, timings) {
        Some((plane, members)) => {
            let mut is_member = vec![false; input.len()];
            for &i in &members {
                is_member[i] = true;
                node.plane_points.push_back(input[i]);
            }
            outliers.extend(input.iter().zip(&is_member).filter(|(_, &m)| !m).map(|(p, _)| *p));
            node.plane = Some(plane);
        }
        None => outliers = input,
    }

    if outliers.is_empty() {
        return node;
    }
    if geometry.depth > cfg.max_depth {
        node.non_plane_points.extend(outliers);
        return node;
    }

    let mut octants: [PointList; 8] = Default::default();
    for p in outliers {
        octants[geometry.octant_of(&p.position)].push_back(p);
    }
    for (o, list) in octants.into_iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let child_geom = geometry.child(o);
        let child = if list.len() >= cfg.min_points {
            build_octree(list, child_geom, cfg, rng, timings)
        } else {
            OctreeNode::leaf(child_geom, list)
        };
        node.children[o] = Some(Box::new(child));
    }
    node
}

/// Route a new point to the nearest plane on its octree path and absorb it if
/// it lies within `distance_threshold` of that plane and the plane stays thin
/// (`λ_min < planarity_threshold`). Rejected points are
/// kept as non-plane points of the deepest node containing them.
///
/// Returns whether the point was absorbed, or [`MapError::NoPlane`] when the
/// path holds no plane (the point is untouched; the caller stores it).
pub fn incremental_update(node: &mut OctreeNode, p_new: WorldPoint, cfg: &MapConfig) -> Result<bool, MapError> {
    let level = node.nearest_plane_on_path(&p_new.position).ok_or(MapError::NoPlane)?;
    let target = node.descend_mut(&p_new.position, level);
    let plane = target.plane.as_mut().expect("nearest plane exists at this level");
    let near = plane.signed_distance(&p_new.position).abs() <= cfg.distance_threshold;
    let updated = plane.fit().with_point(&p_new.position);
    if near && updated.lambda_min() < cfg.planarity_threshold {
        plane.absorb(updated, cfg.converged_cov_trace);
        target.plane_points.push_back(p_new);
        Ok(true)
    } else {
        node.store_non_plane(p_new);
        Ok(false)
    }
}
