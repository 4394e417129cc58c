//! Point-distribution check for a candidate plane.
//!
//! Inliers are projected onto the plane's two principal axes, binned into a
//! square grid, and the occupied cells are grouped into 4-connected clusters.
//! Only the cluster holding the most points survives, and only if it covers
//! more than `p_th` of the points that entered the octree node.

use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::{Vec3, WorldPoint};
use crate::plane::PlaneFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridIndex {
    pub x: i64,
    pub y: i64,
}

impl GridIndex {
    pub fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    fn neighbors(self) -> [GridIndex; 4] {
        [
            GridIndex::new(self.x + 1, self.y),
            GridIndex::new(self.x - 1, self.y),
            GridIndex::new(self.x, self.y + 1),
            GridIndex::new(self.x, self.y - 1),
        ]
    }
}

/// Inliers binned on the plane. Each cell lists the indices of its points.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid {
    pub resolution: f64,
    pub origin: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub cells: BTreeMap<GridIndex, Vec<usize>>,
}

impl PlaneGrid {
    pub fn total_points(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCluster {
    /// Sorted ascending.
    pub cells: Vec<GridIndex>,
    pub total_points: usize,
    /// Sorted ascending.
    pub point_indices: Vec<usize>,
}

/// Bin `inliers` by `(⌊(p − q)·u₁ / r⌋, ⌊(p − q)·u₂ / r⌋)`.
pub fn project_to_grid(inliers: &[WorldPoint], origin: &Vec3, axis_u: &Vec3, axis_v: &Vec3, resolution: f64) -> PlaneGrid {
    let mut cells: BTreeMap<GridIndex, Vec<usize>> = BTreeMap::new();
    for (i, p) in inliers.iter().enumerate() {
        let d = p.position - origin;
        let idx = GridIndex::new(
            (d.dot(axis_u) / resolution).floor() as i64,
            (d.dot(axis_v) / resolution).floor() as i64,
        );
        cells.entry(idx).or_default().push(i);
    }
    PlaneGrid {
        resolution,
        origin: *origin,
        axis_u: *axis_u,
        axis_v: *axis_v,
        cells,
    }
}

/// 4-connected components of the occupied cells, found by depth-first region
/// growing. Ordered by descending point count, ties by smallest cell.
pub fn cluster_grids(grid: &PlaneGrid) -> Vec<GridCluster> {
    let mut visited: BTreeSet<GridIndex> = BTreeSet::new();
    let mut clusters = Vec::new();
    for &seed in grid.cells.keys() {
        if !visited.insert(seed) {
            continue;
        }
        let mut stack = vec![seed];
        let mut cells = Vec::new();
        while let Some(cell) = stack.pop() {
            cells.push(cell);
            for nb in cell.neighbors() {
                if grid.cells.contains_key(&nb) && visited.insert(nb) {
                    stack.push(nb);
                }
            }
        }
        cells.sort_unstable();
        let mut point_indices: Vec<usize> = cells.iter().flat_map(|c| grid.cells[c].iter().copied()).collect();
        point_indices.sort_unstable();
        clusters.push(GridCluster {
            total_points: point_indices.len(),
            cells,
            point_indices,
        });
    }
    clusters.sort_by(|a, b| b.total_points.cmp(&a.total_points).then_with(|| a.cells[0].cmp(&b.cells[0])));
    clusters
}

/// Result of [`plane_validity_check`]; indices refer to the inlier slice.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidityOutcome {
    pub valid: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Keep the dominant cluster of `inliers` if
/// `|best| / total_input_count > inlier_ratio`; otherwise reject everything.
///
/// `total_input_count` is the number of points that entered the octree node,
/// not the number of inliers. The grid resolution is `voxel_size / grid_divisor`.
pub fn plane_validity_check(
    fit: &PlaneFit,
    inliers: &[WorldPoint],
    total_input_count: usize,
    inlier_ratio: f64,
    grid_divisor: u32,
    voxel_size: f64,
) -> ValidityOutcome {
    if inliers.is_empty() || total_input_count == 0 {
        return ValidityOutcome {
            valid: Vec::new(),
            rejected: (0..inliers.len()).collect(),
        };
    }
    let resolution = voxel_size / grid_divisor as f64;
    let grid = project_to_grid(inliers, &fit.centroid, &fit.axis(0), &fit.axis(1), resolution);
    let clusters = cluster_grids(&grid);
    let best = &clusters[0];
    if (best.total_points as f64) / (total_input_count as f64) > inlier_ratio {
        let mut keep = vec![false; inliers.len()];
        for &i in &best.point_indices {
            keep[i] = true;
        }
        let (valid, rejected) = (0..inliers.len()).partition(|&i| keep[i]);
        ValidityOutcome { valid, rejected }
    } else {
        ValidityOutcome {
            valid: Vec::new(),
            rejected: (0..inliers.len()).collect(),
        }
    }
}
