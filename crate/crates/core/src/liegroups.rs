//! Matrix Lie groups SO(2), SO(3) and SE(3).
//!
//! Tangent vectors of SE(3) are ordered `(rotation xyz, translation xyz)`, and
//! every covariance in the crate follows that ordering. Perturbations are
//! applied on the right: `X ⊕ δ = X · exp(δ)`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix2, Matrix3, Matrix4, Matrix6, Vector3, Vector6};

/// Tangent vector of SE(3): rotation part first, translation part second.
pub type Tangent6 = Vector6<f64>;

/// Below this rotation angle the exp/log maps switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-6;
/// Below this angle the Jacobian coefficients that suffer cancellation switch
/// to Taylor series. The truncated series stay below 1e-14 relative error here.
const JACOBIAN_SERIES_ANGLE: f64 = 0.6;
/// Series threshold for the inverse Jacobian coefficient.
const JACOBIAN_INV_SERIES_ANGLE: f64 = 0.2;
/// Inside this distance from π the SO(3) log recovers the axis from the
/// symmetric part of the rotation matrix.
const NEAR_PI: f64 = 1e-3;

/// Common interface of the groups used by the factor errors.
pub trait LieGroup: Sized + Copy {
    type Tangent;

    fn identity() -> Self;
    fn compose(&self, other: &Self) -> Self;
    fn inverse(&self) -> Self;
    fn exp(tangent: &Self::Tangent) -> Self;
    fn log(&self) -> Self::Tangent;

    /// `self⁻¹ · other`.
    fn between(&self, other: &Self) -> Self {
        self.inverse().compose(other)
    }
}

/// Group-space error `ln(predicted⁻¹ · measured)^∨`.
///
/// Zero exactly when the two elements agree. This is a right error: a
/// perturbation of `measured` on the right shows up unchanged in the result.
pub fn group_error<G: LieGroup>(predicted: &G, measured: &G) -> G::Tangent {
    predicted.between(measured).log()
}

/// Skew-symmetric matrix with `hat(a) * b == a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

// ---------------------------------------------------------------------------
// SO(2)

/// Planar rotation, stored as its 2×2 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot2 {
    matrix: Matrix2<f64>,
}

impl Rot2 {
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { matrix: Matrix2::new(c, -s, s, c) }
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.matrix
    }

    /// Rotation angle in `(-π, π]`.
    pub fn angle(&self) -> f64 {
        let a = self.matrix[(1, 0)].atan2(self.matrix[(0, 0)]);
        if a <= -PI {
            PI
        } else {
            a
        }
    }
}

impl LieGroup for Rot2 {
    type Tangent = f64;

    fn identity() -> Self {
        Self { matrix: Matrix2::identity() }
    }

    fn compose(&self, other: &Self) -> Self {
        Self { matrix: self.matrix * other.matrix }
    }

    fn inverse(&self) -> Self {
        Self { matrix: self.matrix.transpose() }
    }

    fn exp(tangent: &f64) -> Self {
        Self::from_angle(*tangent)
    }

    fn log(&self) -> f64 {
        self.angle()
    }
}

// ---------------------------------------------------------------------------
// SO(3)

/// 3D rotation stored as an orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot3 {
    matrix: Matrix3<f64>,
}

impl Rot3 {
    /// Wraps a matrix that the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Self { matrix }
    }

    /// Accepts `matrix` if `RᵀR = I` and `det R = 1` within `tol`.
    pub fn try_from_matrix(matrix: Matrix3<f64>, tol: f64) -> Option<Self> {
        let ortho = (matrix.transpose() * matrix - Matrix3::identity()).amax();
        let det = (matrix.determinant() - 1.0).abs();
        (ortho <= tol && det <= tol).then_some(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn rx(angle: f64) -> Self {
        Self::exp(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn ry(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn rz(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    /// `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        Self {
            matrix: Matrix3::new(
                cy * cp,
                cy * sp * sr - sy * cr,
                cy * sp * cr + sy * sr,
                sy * cp,
                sy * sp * sr + cy * cr,
                sy * sp * cr - cy * sr,
                -sp,
                cp * sr,
                cp * cr,
            ),
        }
    }

    /// Inverse of [`Rot3::from_euler`]: `(roll, pitch, yaw)` with pitch in `[-π/2, π/2]`.
    pub fn euler(&self) -> (f64, f64, f64) {
        let m = &self.matrix;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        if m[(2, 0)].abs() < 1.0 - 1e-12 {
            let roll = m[(2, 1)].atan2(m[(2, 2)]);
            let yaw = m[(1, 0)].atan2(m[(0, 0)]);
            (roll, pitch, yaw)
        } else {
            // gimbal lock: only roll ± yaw is observable, put it all in yaw
            let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
            (0.0, pitch, yaw)
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }
}

impl LieGroup for Rot3 {
    type Tangent = Vector3<f64>;

    fn identity() -> Self {
        Self { matrix: Matrix3::identity() }
    }

    fn compose(&self, other: &Self) -> Self {
        Self { matrix: self.matrix * other.matrix }
    }

    fn inverse(&self) -> Self {
        Self { matrix: self.matrix.transpose() }
    }

    fn exp(w: &Vector3<f64>) -> Self {
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(w);
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, one_minus_cos_over_sq(theta))
        };
        Self { matrix: Matrix3::identity() + k * a + k * k * b }
    }

    fn log(&self) -> Vector3<f64> {
        let r = &self.matrix;
        let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let sin_axis = vee(r);
        let sin = sin_axis.norm();
        let theta = sin.atan2(cos);

        if theta < SMALL_ANGLE {
            return sin_axis * (1.0 + theta * theta / 6.0);
        }
        if theta < PI - NEAR_PI {
            return sin_axis * (theta / sin);
        }

        // Near π the antisymmetric part vanishes; read the axis off
        // aaᵀ = (sym(R) − cos·I) / (1 − cos), using the column with the
        // largest diagonal entry.
        let sym = (r + r.transpose()) * 0.5;
        let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
        let i = (0..3)
            .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vector3<f64> = outer.column(i) / outer[(i, i)].max(0.0).sqrt();
        axis.normalize_mut();
        let flip = if sin_axis.norm() > 1e-12 {
            axis.dot(&sin_axis) < 0.0
        } else {
            axis.iter().find(|c| c.abs() > 1e-12).is_some_and(|c| *c < 0.0)
        };
        if flip {
            axis = -axis;
        }
        axis * theta
    }
}

impl Mul for Rot3 {
    type Output = Rot3;

    fn mul(self, rhs: Rot3) -> Rot3 {
        self.compose(&rhs)
    }
}

/// `(1 − cos θ) / θ²` without cancellation.
fn one_minus_cos_over_sq(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        return 0.5 - theta * theta / 24.0;
    }
    let h = (0.5 * theta).sin() / theta;
    2.0 * h * h
}

/// Evaluates `c0 + c1·x + c2·x² + …` by Horner's rule.
fn poly(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// `(θ − sin θ) / θ³`.
fn theta_minus_sin_over_cube(theta: f64) -> f64 {
    if theta < JACOBIAN_SERIES_ANGLE {
        poly(
            theta * theta,
            &[1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0, 1.0 / 39916800.0, -1.0 / 6227020800.0],
        )
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    Matrix3::identity() + k * one_minus_cos_over_sq(theta) + k * k * theta_minus_sin_over_cube(theta)
}

/// Inverse of [`so3_left_jacobian`].
pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let c = if theta < JACOBIAN_INV_SERIES_ANGLE {
        poly(theta2, &[1.0 / 12.0, 1.0 / 720.0, 1.0 / 30240.0, 1.0 / 1209600.0, 1.0 / 47900160.0])
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Right Jacobian of SO(3), `Jr(w) = Jl(-w)`.
pub fn so3_right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-w)
}

/// Inverse right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian_inv(&-w)
}

/// Coupling block `Q(ρ, φ)` of the SE(3) left Jacobian.
fn se3_q_block(w: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let c1 = theta_minus_sin_over_cube(theta);
    let (c2, c3) = if theta < JACOBIAN_SERIES_ANGLE {
        (
            poly(
                theta2,
                &[1.0 / 24.0, -1.0 / 720.0, 1.0 / 40320.0, -1.0 / 3628800.0, 1.0 / 479001600.0, -1.0 / 87178291200.0],
            ),
            poly(
                theta2,
                &[1.0 / 120.0, -1.0 / 2520.0, 1.0 / 120960.0, -1.0 / 9979200.0, 1.0 / 1245404160.0, -1.0 / 217945728000.0],
            ),
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = theta2 * theta2;
        ((theta2 + 2.0 * c - 2.0) / (2.0 * t4), (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta))
    };
    let p = hat(w);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3) in `(rotation, translation)` ordering.
pub fn se3_left_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    let w = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    let j = so3_left_jacobian(&w);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&se3_q_block(&w, &rho));
    out
}

/// Inverse of [`se3_left_jacobian`].
pub fn se3_left_jacobian_inv(xi: &Tangent6) -> Matrix6<f64> {
    let w = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    let jinv = so3_left_jacobian_inv(&w);
    let q = se3_q_block(&w, &rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-jinv * q * jinv));
    out
}

/// Right Jacobian of SE(3), `Jr(ξ) = Jl(-ξ)`.
pub fn se3_right_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian(&-xi)
}

/// Inverse right Jacobian of SE(3).
pub fn se3_right_jacobian_inv(xi: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian_inv(&-xi)
}

// ---------------------------------------------------------------------------
// SE(3)

/// Rigid body transform: `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3 {
    rotation: Rot3,
    translation: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rotation: Rot3, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Rot3::identity(), Vector3::new(x, y, z))
    }

    pub fn from_rotation(rotation: Rot3) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn rotation(&self) -> &Rot3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Homogeneous 4×4 matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Adjoint in `(rotation, translation)` ordering:
    /// `[[R, 0], [t^ R, R]]`, so that `T exp(ξ) T⁻¹ = exp(Ad(T) ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Right retraction `self · exp(delta)`.
    pub fn retract(&self, delta: &Tangent6) -> Self {
        self.compose(&Self::exp(delta))
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().chain(self.rotation.matrix.iter()).all(|v| v.is_finite())
    }
}

impl LieGroup for Pose3 {
    type Tangent = Tangent6;

    fn identity() -> Self {
        Self::new(Rot3::identity(), Vector3::zeros())
    }

    fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self { rotation: rinv, translation: -rinv.rotate(&self.translation) }
    }

    fn exp(xi: &Tangent6) -> Self {
        let w = xi.fixed_rows::<3>(0).into_owned();
        let rho = xi.fixed_rows::<3>(3).into_owned();
        Self { rotation: Rot3::exp(&w), translation: so3_left_jacobian(&w) * rho }
    }

    fn log(&self) -> Tangent6 {
        let w = self.rotation.log();
        let rho = so3_left_jacobian_inv(&w) * self.translation;
        Tangent6::new(w.x, w.y, w.z, rho.x, rho.y, rho.z)
    }
}

impl Mul for Pose3 {
    type Output = Pose3;

    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

impl fmt::Display for Pose3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let (roll, pitch, yaw) = self.rotation.euler();
        write!(
            f,
            "Pose3(t: [{:.4}, {:.4}, {:.4}], rpy: [{:.4}, {:.4}, {:.4}])",
            t.x, t.y, t.z, roll, pitch, yaw
        )
    }
}
