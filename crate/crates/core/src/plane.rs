//! Plane extraction: RANSAC inlier/outlier partition, eigen fitting from
//! sufficient statistics, and first-order propagation of point noise into
//! the plane parameters `(n, q)`.

use nalgebra::{Matrix6, SMatrix, SymmetricEigen, Vector6};
use rand::Rng;
use thiserror::Error;

use crate::geometry::{Mat3, Vec3, WorldPoint};

pub type Mat6 = Matrix6<f64>;
pub type Mat6x3 = SMatrix<f64, 6, 3>;
pub type Vec6 = Vector6<f64>;

/// Planes whose two smallest eigenvalues are closer than this (m²) have an
/// ill-defined normal and are rejected.
pub const EIGENGAP_TOLERANCE: f64 = 1e-8;

/// Default RANSAC seed.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("every RANSAC sample was collinear")]
    DegenerateInput,
    #[error("eigengap {gap:e} m² is below tolerance; plane normal is ill-defined")]
    EigengapTooSmall { gap: f64 },
}

/// Outcome of [`ransac_partition`]. Indices refer to the input slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub inliers: Vec<usize>,
    pub outliers: Vec<usize>,
    pub model_normal: Vec3,
    /// Signed distance of `x` to the model is `model_normal · x + model_offset`.
    pub model_offset: f64,
}

/// Split `points` into inliers and outliers of the best 3-point plane hypothesis.
///
/// Each of the `iterations` rounds samples three distinct points; collinear
/// samples are skipped. Hypotheses are ranked by inlier count (distance
/// `<= distance_threshold`), ties by lower mean absolute inlier distance.
pub fn ransac_partition<R: Rng + ?Sized>(
    points: &[WorldPoint],
    distance_threshold: f64,
    iterations: usize,
    rng: &mut R,
) -> Result<RansacResult, FitError> {
    let n = points.len();
    if n < 3 {
        return Err(FitError::DegenerateInput);
    }
    let mut best: Option<(usize, f64, Vec3, f64)> = None;
    for _ in 0..iterations {
        let sample = rand::seq::index::sample(rng, n, 3);
        let a = points[sample.index(0)].position;
        let b = points[sample.index(1)].position;
        let c = points[sample.index(2)].position;
        let ab = b - a;
        let ac = c - a;
        let cross = ab.cross(&ac);
        let area = cross.norm();
        if area <= 1e-9 * ab.norm() * ac.norm() || area == 0.0 {
            continue;
        }
        let normal = cross / area;
        let offset = -normal.dot(&a);
        let mut count = 0usize;
        let mut dist_sum = 0.0;
        for p in points {
            let d = (normal.dot(&p.position) + offset).abs();
            if d <= distance_threshold {
                count += 1;
                dist_sum += d;
            }
        }
        let mean = dist_sum / count.max(1) as f64;
        let better = match best {
            None => true,
            Some((bc, bm, _, _)) => count > bc || (count == bc && mean < bm),
        };
        if better {
            best = Some((count, mean, normal, offset));
        }
    }
    let (_, _, model_normal, model_offset) = best.ok_or(FitError::DegenerateInput)?;
    let (inliers, outliers): (Vec<usize>, Vec<usize>) = (0..n)
        .partition(|&i| (model_normal.dot(&points[i].position) + model_offset).abs() <= distance_threshold);
    Ok(RansacResult {
        inliers,
        outliers,
        model_normal,
        model_offset,
    })
}

/// Moment-based plane fit. Keeps the running sum and second moment `S = Σ p pᵀ`
/// so that further points can be absorbed without revisiting the old ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub count: usize,
    pub sum: Vec3,
    /// `S = Σ p pᵀ`.
    pub moment: Mat3,
    /// `q = sum / N`.
    pub centroid: Vec3,
    /// `A = S / N − q qᵀ`.
    pub scatter: Mat3,
    /// Descending: `λ₁ ≥ λ₂ ≥ λ₃`.
    pub eigenvalues: Vec3,
    /// Columns `u₁, u₂, u₃` matching `eigenvalues`; `u₃` is the normal.
    pub eigenvectors: Mat3,
}

impl PlaneFit {
    /// Rebuild centroid, scatter and eigen-structure from sufficient statistics.
    pub fn from_moments(count: usize, sum: Vec3, moment: Mat3) -> Self {
        debug_assert!(count > 0);
        let n = count as f64;
        let centroid = sum / n;
        let scatter = moment / n - centroid * centroid.transpose();
        let (eigenvalues, eigenvectors) = sorted_eigen(&scatter);
        Self {
            count,
            sum,
            moment,
            centroid,
            scatter,
            eigenvalues,
            eigenvectors,
        }
    }

    /// Fit with one more point absorbed; `self` is left untouched.
    pub fn with_point(&self, p: &Vec3) -> Self {
        Self::from_moments(self.count + 1, self.sum + p, self.moment + p * p.transpose())
    }

    pub fn normal(&self) -> Vec3 {
        self.eigenvectors.column(2).into_owned()
    }

    pub fn axis(&self, m: usize) -> Vec3 {
        self.eigenvectors.column(m).into_owned()
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[2]
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal().dot(&(p - self.centroid))
    }
}

/// Flip `v` so that its largest-magnitude component is positive.
pub fn canonical_sign(v: Vec3) -> Vec3 {
    if v[v.iamax()] < 0.0 {
        -v
    } else {
        v
    }
}

fn sorted_eigen(a: &Mat3) -> (Vec3, Mat3) {
    let eig = SymmetricEigen::new(*a);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vec3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let mut vectors = Mat3::zeros();
    for (k, &src) in order.iter().enumerate() {
        vectors.set_column(k, &canonical_sign(eig.eigenvectors.column(src).into_owned()));
    }
    (values, vectors)
}

/// Centroid, scatter and eigen-structure of a point set, accumulated in order.
pub fn fit_plane_moments<'a, I>(points: I) -> PlaneFit
where
    I: IntoIterator<Item = &'a Vec3>,
{
    let mut count = 0usize;
    let mut sum = Vec3::zeros();
    let mut moment = Mat3::zeros();
    for p in points {
        count += 1;
        sum += p;
        moment += p * p.transpose();
    }
    PlaneFit::from_moments(count, sum, moment)
}

/// Jacobian of `(n, q)` with respect to one of the fitted points.
///
/// Rows 0..3 are `∂n/∂p = U [F₁; F₂; F₃]` with
/// `F_m = (p − q)ᵀ (u_m nᵀ + n u_mᵀ) / (N (λ₃ − λ_m))` and `F₃ = 0`;
/// rows 3..6 are `∂q/∂p = I / N`.
pub fn plane_point_jacobian(fit: &PlaneFit, p: &Vec3) -> Result<Mat6x3, FitError> {
    let gap = fit.eigenvalues[1] - fit.eigenvalues[2];
    if !(gap >= EIGENGAP_TOLERANCE) {
        return Err(FitError::EigengapTooSmall { gap });
    }
    let n_pts = fit.count as f64;
    let normal = fit.normal();
    let offset = (p - fit.centroid).transpose();
    let mut f = Mat3::zeros();
    for m in 0..2 {
        let u = fit.axis(m);
        let row = offset * (u * normal.transpose() + normal * u.transpose())
            / (n_pts * (fit.eigenvalues[2] - fit.eigenvalues[m]));
        f.set_row(m, &row);
    }
    let mut jac = Mat6x3::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(fit.eigenvectors * f));
    jac.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(Mat3::identity() / n_pts));
    Ok(jac)
}

/// `Σ_{n,q} = Σᵢ Jᵢ Σ_{pᵢ} Jᵢᵀ` over the points the fit was built from.
pub fn plane_covariance(fit: &PlaneFit, points: &[WorldPoint]) -> Result<Mat6, FitError> {
    let mut cov = Mat6::zeros();
    for wp in points {
        let j = plane_point_jacobian(fit, &wp.position)?;
        cov += j * wp.cov * j.transpose();
    }
    Ok(0.5 * (cov + cov.transpose()))
}

/// A probabilistic plane: moment fit plus the 6×6 covariance of `(n, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    fit: PlaneFit,
    param_cov: Mat6,
    converged: bool,
}

impl Plane {
    /// Fit a plane and its covariance from `points`. The plane is flagged as
    /// converged once `trace(Σ_{n,q}) < converged_cov_trace`.
    pub fn from_points(points: &[WorldPoint], converged_cov_trace: f64) -> Result<Self, FitError> {
        let fit = fit_plane_moments(points.iter().map(|p| &p.position));
        let param_cov = plane_covariance(&fit, points)?;
        Ok(Self {
            converged: param_cov.trace() < converged_cov_trace,
            fit,
            param_cov,
        })
    }

    pub fn from_parts(fit: PlaneFit, param_cov: Mat6, converged: bool) -> Self {
        Self {
            fit,
            param_cov,
            converged,
        }
    }

    pub fn fit(&self) -> &PlaneFit {
        &self.fit
    }

    pub fn normal(&self) -> Vec3 {
        self.fit.normal()
    }

    pub fn centroid(&self) -> Vec3 {
        self.fit.centroid
    }

    pub fn eigenvalues(&self) -> Vec3 {
        self.fit.eigenvalues
    }

    pub fn eigenvectors(&self) -> Mat3 {
        self.fit.eigenvectors
    }

    pub fn moment(&self) -> Mat3 {
        self.fit.moment
    }

    pub fn num_points(&self) -> usize {
        self.fit.count
    }

    pub fn param_cov(&self) -> &Mat6 {
        &self.param_cov
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn lambda_min(&self) -> f64 {
        self.fit.lambda_min()
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.fit.signed_distance(p)
    }

    /// Commit an incremental update. Until the plane converges its covariance is
    /// shrunk by `N / (N + 1)` as a stand-in for a full recomputation.
    pub(crate) fn absorb(&mut self, updated: PlaneFit, converged_cov_trace: f64) {
        if !self.converged {
            let old_n = self.fit.count as f64;
            self.param_cov *= old_n / (old_n + 1.0);
            self.converged = self.param_cov.trace() < converged_cov_trace;
        }
        self.fit = updated;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    fn exact(points: &[Vec3]) -> Vec<WorldPoint> {
        points.iter().map(|p| WorldPoint::exact(*p)).collect()
    }

    fn grid_on_z0(n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|i| Vec3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.13, 0.0))
            .collect()
    }

    #[test]
    fn ransac_noiseless_plane_keeps_everything() {
        let pts = exact(&grid_on_z0(50));
        let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
        let res = ransac_partition(&pts, 0.05, 10, &mut rng).unwrap();
        assert_eq!(res.inliers.len(), 50);
        assert!(res.outliers.is_empty());
        assert!((res.model_normal.z.abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ransac_separates_offset_points() {
        let mut pts = grid_on_z0(40);
        for i in 0..10 {
            pts.push(Vec3::new(i as f64 * 0.1, 0.3, 5.0));
        }
        let pts = exact(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(DEFAULT_SEED);
        let res = ransac_partition(&pts, 0.05, 20, &mut rng).unwrap();
        assert_eq!(res.inliers, (0..40).collect::<Vec<_>>());
        assert_eq!(res.outliers, (40..50).collect::<Vec<_>>());
    }

    #[test]
    fn ransac_collinear_is_degenerate() {
        let line = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 2.0, 2.0)];
        let pts: Vec<WorldPoint> = line.iter().chain(line.iter()).map(|p| WorldPoint::exact(*p)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(ransac_partition(&pts, 0.05, 10, &mut rng), Err(FitError::DegenerateInput));
    }

    #[test]
    fn ransac_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Uniform::new(0.0, 3.0).unwrap();
        let pts: Vec<WorldPoint> = (0..80)
            .map(|_| WorldPoint::exact(Vec3::new(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng))))
            .collect();
        let a = ransac_partition(&pts, 0.1, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ransac_partition(&pts, 0.1, 20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_symmetric_cross() {
        let pts = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()];
        let fit = fit_plane_moments(pts.iter());
        assert_eq!(fit.centroid, Vec3::zeros());
        assert_eq!(fit.lambda_min(), 0.0);
        assert!((fit.normal() - Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn fit_noisy_plane_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(u.sample(&mut rng), u.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        let fit = fit_plane_moments(pts.iter());
        let lmin = fit.lambda_min();
        assert!(lmin > 0.5e-4 && lmin < 2e-4, "λ₃ = {lmin}");
        assert!(fit.normal().dot(&Vec3::z()).acos().to_degrees() < 1.0);
    }

    #[test]
    fn fit_is_translation_equivariant() {
        let pts: Vec<Vec3> = (0..30)
            .map(|i| {
                let t = i as f64;
                Vec3::new(t.sin(), (1.3 * t).cos(), 0.05 * (0.7 * t).sin())
            })
            .collect();
        let shift = Vec3::new(0.5, -0.25, 0.75);
        let moved: Vec<Vec3> = pts.iter().map(|p| p + shift).collect();
        let a = fit_plane_moments(pts.iter());
        let b = fit_plane_moments(moved.iter());
        assert!((b.centroid - a.centroid - shift).norm() < 1e-12);
        assert!((b.eigenvalues - a.eigenvalues).norm() < 1e-12);
        assert!((b.eigenvectors - a.eigenvectors).norm() < 1e-9);
    }

    fn random_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let thin = Normal::new(0.0, 0.02).unwrap();
        let frame = crate::geometry::so3_exp(&Vec3::new(u.sample(rng), u.sample(rng), u.sample(rng)));
        let center = Vec3::new(u.sample(rng), u.sample(rng), u.sample(rng)) * 3.0;
        (0..n)
            .map(|_| center + frame * Vec3::new(u.sample(rng), 0.6 * u.sample(rng), thin.sample(rng)))
            .collect()
    }

    #[test]
    fn jacobian_q_block_and_zero_f3() {
        let pts = [Vec3::x(), -Vec3::x(), Vec3::y() * 0.5, -Vec3::y() * 0.5];
        let fit = fit_plane_moments(pts.iter());
        let j = plane_point_jacobian(&fit, &pts[0]).unwrap();
        let dq = j.fixed_view::<3, 3>(3, 0).into_owned();
        assert_eq!(dq, Mat3::identity() * 0.25);
        // ∂n/∂p = U F with F₃ = 0, so Uᵀ ∂n/∂p has a zero last row.
        let f = fit.eigenvectors.transpose() * j.fixed_view::<3, 3>(0, 0);
        assert!(f.row(2).norm() < 1e-15);
    }

    /// Central finite differences of the full refit (sign-fixed normal).
    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_plane(&mut rng, 20);
        let fit = fit_plane_moments(pts.iter());
        let h = 1e-6;
        for i in 0..pts.len() {
            let j = plane_point_jacobian(&fit, &pts[i]).unwrap();
            let mut fd = Mat6x3::zeros();
            for k in 0..3 {
                let mut plus = pts.clone();
                let mut minus = pts.clone();
                plus[i][k] += h;
                minus[i][k] -= h;
                let fp = fit_plane_moments(plus.iter());
                let fm = fit_plane_moments(minus.iter());
                let dn = (fp.normal() - fm.normal()) / (2.0 * h);
                let dq = (fp.centroid - fm.centroid) / (2.0 * h);
                fd.fixed_view_mut::<3, 1>(0, k).copy_from(&dn);
                fd.fixed_view_mut::<3, 1>(3, k).copy_from(&dq);
            }
            let rel = (fd - j).norm() / j.norm();
            assert!(rel < 1e-5, "point {i}: relative error {rel}");
        }
    }

    #[test]
    fn jacobian_rejects_degenerate_eigengap() {
        // Points on a line: λ₂ = λ₃ = 0.
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
        let fit = fit_plane_moments(pts.iter());
        assert!(matches!(plane_point_jacobian(&fit, &pts[0]), Err(FitError::EigengapTooSmall { .. })));
    }

    #[test]
    fn covariance_zero_and_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = random_plane(&mut rng, 25);
        let fit = fit_plane_moments(pts.iter());
        let zero = plane_covariance(&fit, &exact(&pts)).unwrap();
        assert_eq!(zero, Mat6::zeros());

        let with_cov = |s: f64| -> Vec<WorldPoint> {
            pts.iter().map(|p| WorldPoint::new(*p, Mat3::identity() * s)).collect()
        };
        let a = plane_covariance(&fit, &with_cov(1e-4)).unwrap();
        let b = plane_covariance(&fit, &with_cov(3e-4)).unwrap();
        assert!((b - a * 3.0).norm() <= 1e-12 * b.norm());
    }

    #[test]
    fn covariance_q_block_is_mean_point_cov() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts = random_plane(&mut rng, 30);
        let n = Normal::new(0.0, 1.0).unwrap();
        let wps: Vec<WorldPoint> = pts
            .iter()
            .map(|p| {
                let a = Mat3::from_fn(|_, _| n.sample(&mut rng));
                WorldPoint::new(*p, a * a.transpose() * 1e-4)
            })
            .collect();
        let fit = fit_plane_moments(pts.iter());
        let cov = plane_covariance(&fit, &wps).unwrap();
        let expected: Mat3 = wps.iter().map(|w| w.cov).sum::<Mat3>() / (30.0 * 30.0);
        let q_block = cov.fixed_view::<3, 3>(3, 3).into_owned();
        assert!((q_block - expected).norm() < 1e-15);
    }

    #[test]
    fn plane_records_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pts = random_plane(&mut rng, 40);
        let wps: Vec<WorldPoint> = pts.iter().map(|p| WorldPoint::new(*p, Mat3::identity() * 1e-6)).collect();
        let p = Plane::from_points(&wps, 1.0).unwrap();
        assert!(p.converged());
        let p = Plane::from_points(&wps, 0.0).unwrap();
        assert!(!p.converged());
        assert_eq!(p.num_points(), 40);
    }

    proptest! {
        #[test]
        fn fit_invariants(coords in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -0.5f64..0.5), 3..60)) {
            let pts: Vec<Vec3> = coords.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let fit = fit_plane_moments(pts.iter());
            prop_assert!((fit.scatter - fit.scatter.transpose()).norm() < 1e-12);
            let rebuilt = fit.moment / fit.count as f64 - fit.centroid * fit.centroid.transpose();
            prop_assert_eq!(rebuilt, fit.scatter);
            prop_assert!(fit.eigenvalues[0] >= fit.eigenvalues[1]);
            prop_assert!(fit.eigenvalues[1] >= fit.eigenvalues[2]);
            let n = fit.normal();
            prop_assert!((n.norm() - 1.0).abs() < 1e-9);
            prop_assert!(n.dot(&fit.axis(0)).abs() < 1e-9);
            prop_assert!(n.dot(&fit.axis(1)).abs() < 1e-9);
        }

        #[test]
        fn ransac_partitions_input(seed in 0u64..1000, n in 3usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Uniform::new(0.0, 3.0).unwrap();
            let pts: Vec<WorldPoint> = (0..n)
                .map(|_| WorldPoint::exact(Vec3::new(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng))))
                .collect();
            if let Ok(res) = ransac_partition(&pts, 0.1, 10, &mut rng) {
                let mut all: Vec<usize> = res.inliers.iter().chain(res.outliers.iter()).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                for &i in &res.inliers {
                    let d = (res.model_normal.dot(&pts[i].position) + res.model_offset).abs();
                    prop_assert!(d <= 0.1);
                }
            }
        }
    }
}
