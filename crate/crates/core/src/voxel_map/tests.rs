use super::*;
use crate::geometry::Mat3;
use crate::plane::fit_plane_moments;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

fn wp(x: f64, y: f64, z: f64) -> WorldPoint {
    WorldPoint::new(Vec3::new(x, y, z), Mat3::identity() * 1e-4)
}

/// `nx × ny` lattice on `z = height` starting at `(x0, y0)`.
fn floor(x0: f64, y0: f64, nx: usize, ny: usize, step: f64, height: f64) -> Vec<WorldPoint> {
    let mut v = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            v.push(wp(x0 + i as f64 * step, y0 + j as f64 * step, height));
        }
    }
    v
}

/// Wall on `x = 2.5` confined to octant 7 of the voxel `[0, 3)³`.
fn wall_in_octant7(ny: usize, nz: usize) -> Vec<WorldPoint> {
    let mut v = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            let y = 1.6 + 1.2 * j as f64 / (ny - 1) as f64;
            let z = 1.6 + 1.2 * k as f64 / (nz - 1) as f64;
            v.push(wp(2.5, y, z));
        }
    }
    v
}

fn list(points: &[WorldPoint]) -> PointList {
    points.iter().copied().collect()
}

fn root_geometry() -> NodeGeometry {
    VoxelKey::new(0, 0, 0).root_geometry(3.0)
}

fn build(points: &[WorldPoint], cfg: &MapConfig) -> OctreeNode {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    build_octree(list(points), root_geometry(), cfg, &mut rng, &mut MapTimings::default())
}

fn max_depth(node: &OctreeNode) -> u32 {
    let mut d = 0;
    node.visit(&mut |n| d = d.max(n.geometry().depth));
    d
}

fn assert_structural_invariants(node: &OctreeNode, cfg: &MapConfig) {
    node.visit(&mut |n| {
        let g = n.geometry();
        assert!(g.depth <= cfg.max_depth + 1);
        for p in n.plane_points().iter().chain(n.non_plane_points()) {
            assert!(g.contains(&p.position, 1e-9), "point outside node cube");
        }
        if let Some(plane) = n.plane() {
            assert!(plane.lambda_min() < cfg.planarity_threshold);
            assert_eq!(plane.num_points(), n.plane_points().len());
        }
        if !n.non_plane_points().is_empty() {
            assert!(n.is_leaf());
        }
        for c in n.children() {
            assert_eq!(c.geometry().half_size, g.half_size / 2.0);
            assert_eq!(c.geometry().depth, g.depth + 1);
        }
    });
}

#[test]
fn key_and_octant_conventions() {
    assert_eq!(VoxelKey::of(&Vec3::new(-0.1, 2.99, 3.0), 3.0), VoxelKey::new(-1, 0, 1));
    let g = root_geometry();
    assert_eq!(g.center, Vec3::repeat(1.5));
    assert_eq!(g.octant_of(&Vec3::new(1.5, 1.5, 1.5)), 7);
    assert_eq!(g.octant_of(&Vec3::new(1.0, 2.0, 1.0)), 2);
    assert_eq!(g.child(7).center, Vec3::repeat(2.25));
}

#[test]
fn coplanar_voxel_is_a_single_root_plane() {
    let cfg = MapConfig::default();
    let pts = floor(0.15, 0.15, 10, 10, 0.3, 1.0);
    let root = build(&pts, &cfg);
    assert!(root.plane().is_some());
    assert!(root.is_leaf());
    assert_eq!(max_depth(&root), 0);
    assert_eq!(root.plane_points().len(), 100);
    assert_structural_invariants(&root, &cfg);
}

#[test]
fn outliers_are_refitted_at_depth_one() {
    let cfg = MapConfig::default();
    let floor_pts = floor(0.2, 0.2, 10, 7, 0.2, 0.4);
    let wall = wall_in_octant7(6, 5);
    let mut pts = floor_pts.clone();
    pts.extend(wall.iter().copied());

    // Brute-force consensus: the floor plane explains 70 points, the wall 30.
    let near = |n: Vec3, d: f64| pts.iter().filter(|p| (n.dot(&p.position) - d).abs() <= cfg.distance_threshold).count();
    assert_eq!(near(Vec3::z(), 0.4), 70);
    assert_eq!(near(Vec3::x(), 2.5), 30);

    let root = build(&pts, &cfg);
    let root_plane = root.plane().expect("floor plane");
    assert!((root_plane.normal().dot(&Vec3::z()).abs() - 1.0).abs() < 1e-9);
    assert_eq!(root.plane_points().len(), 70);
    let child = root.child(7).expect("wall octant");
    assert_eq!(child.geometry().depth, 1);
    let wall_plane = child.plane().expect("wall plane");
    assert!((wall_plane.normal().dot(&Vec3::x()).abs() - 1.0).abs() < 1e-9);
    assert_eq!(root.planes().len(), 2);
    assert_structural_invariants(&root, &cfg);
}

#[test]
fn uniform_cloud_has_no_plane() {
    let cfg = MapConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let u = Uniform::new(0.0, 3.0).unwrap();
    let pts: Vec<WorldPoint> = (0..100).map(|_| wp(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng))).collect();
    let fit = fit_plane_moments(pts.iter().map(|p| &p.position));
    assert!(fit.lambda_min() > 50.0 * cfg.planarity_threshold);

    let root = build(&pts, &cfg);
    assert!(root.planes().is_empty());
    let mut stored = 0;
    root.visit(&mut |n| {
        assert!(n.plane_points().is_empty());
        stored += n.non_plane_points().len();
    });
    assert_eq!(stored, 100);
    assert_structural_invariants(&root, &cfg);
}

#[test]
fn recursion_respects_max_depth() {
    let cfg = MapConfig {
        max_depth: 1,
        min_points: 3,
        ..MapConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u = Uniform::new(0.0, 3.0).unwrap();
    let pts: Vec<WorldPoint> = (0..400).map(|_| wp(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng))).collect();
    let root = build(&pts, &cfg);
    assert!(max_depth(&root) <= 2);
    assert_eq!(root.point_count(), 400);
    assert_structural_invariants(&root, &cfg);
}

fn thin_plane_node(cfg: &MapConfig, n: usize) -> OctreeNode {
    let side = (n as f64).sqrt() as usize;
    let pts = floor(0.3, 0.3, side, n / side, 0.12, 1.2);
    let root = build(&pts, cfg);
    assert!(root.plane().is_some());
    root
}

#[test]
fn incremental_point_on_plane_is_accepted() {
    let cfg = MapConfig::default();
    let mut root = thin_plane_node(&cfg, 49);
    let before = root.plane().unwrap().clone();
    let accepted = incremental_update(&mut root, wp(1.9, 0.8, 1.2), &cfg).unwrap();
    assert!(accepted);
    let after = root.plane().unwrap();
    assert_eq!(after.num_points(), 50);
    assert!((after.centroid().z - 1.2).abs() < 1e-12);
    assert!(after.centroid().x > before.centroid().x);
    assert!((after.lambda_min() - before.lambda_min()).abs() < 1e-9);
}

#[test]
fn incremental_far_point_is_rejected() {
    let cfg = MapConfig::default();
    let mut root = thin_plane_node(&cfg, 49);
    let before = root.plane().unwrap().clone();
    let far = wp(0.8, 0.8, 2.2);

    // Oracle: eigenvalues of the scatter of the 50-point set computed from scratch.
    let mut all: Vec<Vec3> = root.plane_points().iter().map(|p| p.position).collect();
    all.push(far.position);
    let mean = all.iter().sum::<Vec3>() / all.len() as f64;
    let scatter = all.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Mat3>() / all.len() as f64;
    let lmin = scatter.symmetric_eigenvalues().min();
    assert!(lmin > cfg.planarity_threshold, "λ_min after update {lmin}");

    let accepted = incremental_update(&mut root, far, &cfg).unwrap();
    assert!(!accepted);
    assert_eq!(root.plane().unwrap(), &before);
    assert_eq!(root.point_count(), 50);
    // Stored as a non-plane point of the deepest node containing it.
    let mut holder = None;
    root.visit(&mut |n| {
        if n.non_plane_points().iter().any(|p| p == &far) {
            holder = Some(*n.geometry());
        }
    });
    let holder = holder.expect("rejected point is kept");
    assert!(holder.contains(&far.position, 0.0));
}

#[test]
fn incremental_matches_batch() {
    let cfg = MapConfig::default();
    let mut root = thin_plane_node(&cfg, 49);
    for k in 0..20 {
        let t = k as f64;
        assert!(incremental_update(&mut root, wp(0.4 + 0.07 * t, 1.1 + 0.03 * t, 1.2), &cfg).unwrap());
    }
    let plane = root.plane().unwrap();
    let batch = fit_plane_moments(root.plane_points().iter().map(|p| &p.position));
    assert_eq!(plane.centroid(), batch.centroid);
    assert_eq!(plane.moment(), batch.moment);
    assert_eq!(plane.fit().scatter, batch.scatter);
    assert!((plane.eigenvalues() - batch.eigenvalues).norm() < 1e-9);
}

#[test]
fn no_plane_on_path_is_reported() {
    let cfg = MapConfig::default();
    let mut root = OctreeNode::empty(root_geometry());
    assert_eq!(incremental_update(&mut root, wp(1.0, 1.0, 1.0), &cfg), Err(MapError::NoPlane));
}

#[test]
fn insert_scan_builds_root_plane() {
    let mut map = VoxelMap::new(MapConfig::default()).unwrap();
    map.insert_scan(&floor(0.15, 0.15, 10, 10, 0.3, 1.0));
    assert_eq!(map.len(), 1);
    let voxel = map.voxel(&VoxelKey::new(0, 0, 0)).unwrap();
    assert!(voxel.is_built());
    assert!(voxel.root().plane().is_some());
    assert_eq!(map.stats().builds, 1);
}

#[test]
fn small_batches_wait_until_min_points() {
    let mut map = VoxelMap::new(MapConfig::default()).unwrap();
    let pts = floor(0.15, 0.15, 10, 10, 0.3, 1.0);
    map.insert_scan(&pts[..6]);
    assert!(!map.voxel(&VoxelKey::new(0, 0, 0)).unwrap().is_built());
    map.insert_scan(&pts[6..12]);
    assert!(map.voxel(&VoxelKey::new(0, 0, 0)).unwrap().is_built());
}

#[test]
fn repeated_insert_doubles_support() {
    let mut map = VoxelMap::new(MapConfig::default()).unwrap();
    let pts = floor(0.15, 0.15, 10, 10, 0.3, 1.0);
    map.insert_scan(&pts);
    let n0 = map.voxel(&VoxelKey::new(0, 0, 0)).unwrap().root().plane().unwrap().normal();
    map.insert_scan(&pts);
    let root = map.voxel(&VoxelKey::new(0, 0, 0)).unwrap().root();
    let plane = root.plane().unwrap();
    assert_eq!(plane.num_points(), 200);
    assert!((plane.normal() - n0).norm() < 1e-6);
    let batch = fit_plane_moments(root.plane_points().iter().map(|p| &p.position));
    assert!((batch.normal() - plane.normal()).norm() < 1e-9);
}

#[test]
fn lru_evicts_oldest_voxel() {
    let cfg = MapConfig {
        lru_capacity: 2,
        ..MapConfig::default()
    };
    let mut map = VoxelMap::new(cfg).unwrap();
    for i in 0..3 {
        map.insert_scan(&[wp(3.0 * i as f64 + 1.0, 1.0, 1.0)]);
    }
    assert_eq!(map.len(), 2);
    assert!(!map.contains(&VoxelKey::new(0, 0, 0)));
    assert_eq!(map.keys_by_recency(), vec![VoxelKey::new(2, 0, 0), VoxelKey::new(1, 0, 0)]);
    assert_eq!(map.stats().evictions, 1);
}

#[test]
fn query_touch_protects_voxel() {
    let cfg = MapConfig {
        lru_capacity: 2,
        ..MapConfig::default()
    };
    let mut map = VoxelMap::new(cfg).unwrap();
    map.insert_scan(&[wp(1.0, 1.0, 1.0)]);
    map.insert_scan(&[wp(4.0, 1.0, 1.0)]);
    assert!(map.query_candidate_planes(&Vec3::new(1.0, 1.0, 1.0)).is_empty());
    map.insert_scan(&[wp(7.0, 1.0, 1.0)]);
    assert!(map.contains(&VoxelKey::new(0, 0, 0)));
    assert!(!map.contains(&VoxelKey::new(1, 0, 0)));
}

#[test]
fn reconstruct_is_idempotent_and_conserves_points() {
    let mut map = VoxelMap::new(MapConfig::default()).unwrap();
    let mut pts = floor(0.2, 0.2, 10, 7, 0.2, 0.4);
    pts.extend(wall_in_octant7(6, 5));
    map.insert_scan(&pts);
    let key = VoxelKey::new(0, 0, 0);
    let before: Vec<Plane> = map.voxel(&key).unwrap().root().planes().into_iter().cloned().collect();
    let count = map.voxel(&key).unwrap().root().point_count();
    assert!(map.reconstruct_octree(&key));
    let root = map.voxel(&key).unwrap().root();
    assert_eq!(root.point_count(), count);
    let after = root.planes();
    assert_eq!(after.len(), before.len());
    for (a, b) in after.iter().zip(&before) {
        assert!((a.normal() - b.normal()).norm() < 1e-9);
        assert!((a.centroid() - b.centroid()).norm() < 1e-9);
        assert!((a.param_cov() - b.param_cov()).norm() < 1e-9);
    }
    assert!(!map.reconstruct_octree(&VoxelKey::new(5, 5, 5)));
}

#[test]
fn reconstruct_recovers_late_structure() {
    let cfg = MapConfig {
        rebuild_point_threshold: usize::MAX,
        ..MapConfig::default()
    };
    let mut map = VoxelMap::new(cfg.clone()).unwrap();
    let floor_pts = floor(0.2, 0.2, 12, 11, 0.15, 0.4);
    let wall = wall_in_octant7(10, 9);
    // Sparse start: 12 floor points spread out plus 8 wall points.
    let mut sparse: Vec<WorldPoint> = floor_pts.iter().step_by(11).copied().collect();
    sparse.extend(wall.iter().step_by(11).copied());
    assert_eq!(sparse.len(), 21);
    map.insert_scan(&sparse);
    let key = VoxelKey::new(0, 0, 0);
    assert!(map.voxel(&key).unwrap().root().planes().len() <= 1);

    let mut rest: Vec<WorldPoint> = floor_pts.iter().enumerate().filter(|(i, _)| i % 11 != 0).map(|(_, p)| *p).collect();
    rest.extend(wall.iter().enumerate().filter(|(i, _)| i % 11 != 0).map(|(_, p)| *p));
    map.insert_scan(&rest);
    let total = sparse.len() + rest.len();
    assert_eq!(map.voxel(&key).unwrap().root().point_count(), total);

    assert!(map.reconstruct_octree(&key));
    let root = map.voxel(&key).unwrap().root();
    assert_eq!(root.point_count(), total);
    let planes = root.planes();
    assert_eq!(planes.len(), 2);
    assert!((root.plane().unwrap().normal().dot(&Vec3::z()).abs() - 1.0).abs() < 1e-9);
    let wall_node = root.child(7).unwrap();
    assert!((wall_node.plane().unwrap().normal().dot(&Vec3::x()).abs() - 1.0).abs() < 1e-9);
    assert_structural_invariants(root, &cfg);
}

#[test]
fn query_returns_subtree_planes() {
    let mut map = VoxelMap::new(MapConfig::default()).unwrap();
    assert!(map.query_candidate_planes(&Vec3::new(1.0, 1.0, 1.0)).is_empty());

    map.insert_scan(&floor(0.15, 0.15, 10, 10, 0.3, 1.0));
    assert_eq!(map.query_candidate_planes(&Vec3::new(1.0, 1.0, 1.0)).len(), 1);

    // Floor plus two walls confined to octants 7 and 5.
    let mut pts = floor(3.2, 0.2, 10, 7, 0.2, 0.4);
    pts.extend(wall_in_octant7(6, 5).iter().map(|p| wp(p.position.x + 3.0, p.position.y, p.position.z)));
    pts.extend(wall_in_octant7(6, 5).iter().map(|p| wp(p.position.x + 3.0, p.position.y - 1.5, p.position.z)));
    map.insert_scan(&pts);
    let key = VoxelKey::new(1, 0, 0);
    let root = map.voxel(&key).unwrap().root();
    let mut brute = Vec::new();
    fn scan<'a>(n: &'a OctreeNode, out: &mut Vec<&'a Plane>) {
        if let Some(p) = n.plane() {
            out.push(p);
        }
        for o in 0..8 {
            if let Some(c) = n.child(o) {
                scan(c, out);
            }
        }
    }
    scan(root, &mut brute);
    let got = map.query_candidate_planes(&Vec3::new(4.0, 1.0, 1.0));
    assert_eq!(got.len(), 3);
    assert_eq!(got.len(), brute.len());
    assert!(got.iter().zip(&brute).all(|(a, b)| std::ptr::eq(*a, *b)));
}

#[test]
fn identical_streams_give_identical_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = Uniform::new(-6.0, 6.0).unwrap();
    let noise = Uniform::new(-0.01, 0.01).unwrap();
    let scans: Vec<Vec<WorldPoint>> = (0..4)
        .map(|_| {
            (0..600)
                .map(|i| match i % 3 {
                    0 => wp(u.sample(&mut rng), u.sample(&mut rng), 0.5 + noise.sample(&mut rng)),
                    1 => wp(2.2 + noise.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)),
                    _ => wp(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)),
                })
                .collect()
        })
        .collect();
    let run = || {
        let mut map = VoxelMap::new(MapConfig::default()).unwrap();
        for s in &scans {
            map.insert_scan(s);
        }
        map
    };
    let (a, b) = (run(), run());
    assert_eq!(a.summary(), b.summary());
    assert!(a.summary().planes > 0);
    assert_eq!(a.summary().points, 2400);
    for (_, voxel) in a.voxels() {
        assert_structural_invariants(voxel.root(), a.config());
    }
}

#[test]
fn config_validation() {
    assert!(MapConfig::default().validate().is_ok());
    let bad = MapConfig {
        inlier_ratio: 1.5,
        ..MapConfig::default()
    };
    assert!(matches!(VoxelMap::new(bad), Err(MapError::InvalidConfig(_))));
    let bad = MapConfig {
        voxel_size: 0.0,
        ..MapConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn incremental_point_beyond_distance_threshold_is_rejected() {
    let cfg = MapConfig::default();
    let mut root = thin_plane_node(&cfg, 49);
    let p = wp(0.8, 0.8, 1.2 + 0.08);
    assert!(root.plane().unwrap().fit().with_point(&p.position).lambda_min() < cfg.planarity_threshold);
    assert!(!incremental_update(&mut root, p, &cfg).unwrap());
    assert_eq!(root.plane().unwrap().num_points(), 49);
}
