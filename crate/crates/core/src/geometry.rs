//! Basic 3D types, rigid poses and uncertainty-aware frame transforms.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential of a rotation vector.
pub fn so3_exp(phi: &Vec3) -> Mat3 {
    Rotation3::new(*phi).into_inner()
}

/// Rotation vector of a rotation matrix (inverse of [`so3_exp`]).
pub fn so3_log(rotation: &Mat3) -> Vec3 {
    let r = rotation;
    // sin(θ) · axis
    let v = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < 1e-6 {
        return v * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near a half turn the antisymmetric part vanishes; nalgebra's
        // axis extraction is accurate there.
        return Rotation3::from_matrix_unchecked(*rotation).scaled_axis();
    }
    v * (theta / s)
}

/// Right Jacobian of SO(3): `exp(phi + d) ≈ exp(phi) exp(Jr(phi) d)`.
pub fn so3_right_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Mat3::identity() - 0.5 * k;
    }
    let t2 = theta * theta;
    Mat3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Symmetric part of a matrix, used to scrub round-off asymmetry from covariances.
pub fn symmetrize(m: &Mat3) -> Mat3 {
    0.5 * (m + m.transpose())
}

/// Rigid transform from a local frame into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Pose from a rotation vector (axis * angle, radians) and a translation.
    pub fn from_rotation_vector(phi: Vec3, translation: Vec3) -> Self {
        Self::new(so3_exp(&phi), translation)
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Right perturbation `(R exp(dθ), t + dt)`.
    pub fn perturbed(&self, d_rot: &Vec3, d_trans: &Vec3) -> Pose {
        Pose::new(self.rotation * so3_exp(d_rot), self.translation + d_trans)
    }

    /// `‖RᵀR − I‖` (Frobenius).
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).norm()
    }

    /// Re-project the rotation onto SO(3) to stop drift from repeated composition.
    pub fn renormalized(&self) -> Pose {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-12, 16, Rotation3::identity());
        Pose::new(rot.into_inner(), self.translation)
    }
}

/// Tangent-space rotation covariance (rad²) and translation covariance (m²) of a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseCov {
    pub rot_cov: Mat3,
    pub trans_cov: Mat3,
}

impl PoseCov {
    pub fn zero() -> Self {
        Self {
            rot_cov: Mat3::zeros(),
            trans_cov: Mat3::zeros(),
        }
    }
}

impl Default for PoseCov {
    fn default() -> Self {
        Self::zero()
    }
}

/// A world-frame point with its 3×3 position covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPoint {
    pub position: Vec3,
    pub cov: Mat3,
}

impl WorldPoint {
    pub fn new(position: Vec3, cov: Mat3) -> Self {
        Self { position, cov }
    }

    /// A point with zero covariance.
    pub fn exact(position: Vec3) -> Self {
        Self::new(position, Mat3::zeros())
    }
}

/// Move a sensor-frame point and its covariance into the world frame.
///
/// The rotation uncertainty is a right perturbation `R exp(δθ)`, which gives
/// `Σ_w = R Σ_p Rᵀ + R ⌊p⌋ Σ_R ⌊p⌋ᵀ Rᵀ + Σ_t`.
pub fn transform_point(lidar_point: &Vec3, point_cov: &Mat3, pose: &Pose, pose_cov: &PoseCov) -> WorldPoint {
    let r = &pose.rotation;
    let rp = r * skew(lidar_point);
    let cov = r * point_cov * r.transpose() + rp * pose_cov.rot_cov * rp.transpose() + pose_cov.trans_cov;
    WorldPoint::new(pose.transform(lidar_point), symmetrize(&cov))
}

/// Range/bearing noise model for a LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeBearingNoise {
    /// Range standard deviation, m.
    pub range_sigma: f64,
    /// Bearing standard deviation, degrees.
    pub bearing_sigma_deg: f64,
}

impl Default for RangeBearingNoise {
    fn default() -> Self {
        Self {
            range_sigma: 0.02,
            bearing_sigma_deg: 0.05,
        }
    }
}

impl RangeBearingNoise {
    /// Cartesian covariance of a sensor-frame point: radial variance `σ_r²` and
    /// tangential variance `(r σ_b)²` in both directions orthogonal to the ray.
    pub fn covariance(&self, p: &Vec3) -> Mat3 {
        let range = p.norm();
        let range_var = self.range_sigma * self.range_sigma;
        if range < 1e-9 {
            return Mat3::identity() * range_var;
        }
        let dir = p / range;
        let radial = dir * dir.transpose();
        let bearing = self.bearing_sigma_deg.to_radians() * range;
        radial * range_var + (Mat3::identity() - radial) * (bearing * bearing)
    }
}
