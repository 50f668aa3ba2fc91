//! Rigid-body transforms on SE(3) and their tangent space.
//!
//! Poses store a Hamilton unit quaternion `(qx, qy, qz, qw)` and a translation
//! in meters. Twists are ordered `(rho, phi)`: translational part first, then
//! the axis-angle rotational part. All perturbations in this crate are
//! left-multiplicative, `T <- exp(delta) * T`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

/// Below this rotation angle the exponential and logarithm switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Rotations within this margin of pi use the sign-canonical quaternion branch
/// of the logarithm.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Below this angle the Jacobian coefficients (which divide by up to the fifth
/// power of the angle) are evaluated by series.
pub const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

/// Element of the Lie algebra se(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// A rigid-body transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation.into_inner()),
            translation,
        }
    }

    /// Builds a pose from raw quaternion components, normalizing them.
    /// Returns `None` for a zero or non-finite quaternion.
    pub fn from_xyz_quat(xyz: [f64; 3], quat: [f64; 4]) -> Option<Self> {
        let [qx, qy, qz, qw] = quat;
        let q = Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if !norm.is_finite() || norm == 0.0 || xyz.iter().any(|v| !v.is_finite()) {
            return None;
        }
        // unit input is kept verbatim so parse and serialize are idempotent
        let rotation = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(q)
        } else {
            renormalize(q)
        };
        Some(Self {
            rotation,
            translation: Vector3::from(xyz),
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::new(x, y, z))
    }

    /// Rotation about the z axis by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::zeros(),
        )
    }

    /// Planar pose: position `(x, y, z)` with heading `yaw`.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, z),
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Quaternion components in storage order `(qx, qy, qz, qw)`.
    pub fn quat_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize((self.rotation * other.rotation).into_inner()),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// `self^-1 * other`
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn exp(xi: &Twist) -> Pose {
        let rotation = so3_exp(&xi.phi);
        let translation = so3_left_jacobian(&xi.phi) * xi.rho;
        Pose {
            rotation,
            translation,
        }
    }

    pub fn log(&self) -> Twist {
        let phi = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Twist { rho, phi }
    }

    /// Adjoint for `(rho, phi)` twists: `exp(Ad * xi) = T * exp(xi) * T^-1`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Left-multiplicative retraction `exp(delta) * self`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        Pose::exp(delta).compose(self)
    }

    /// Angle (radians) and translation distance (meters) between two poses.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        let d = self.between(other);
        (d.rotation_angle(), d.translation.norm())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn renormalize(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q)
}

/// Skew-symmetric cross-product matrix.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    if phi.norm() < SMALL_ANGLE {
        so3_exp_taylor(phi)
    } else {
        so3_exp_general(phi)
    }
}

pub(crate) fn so3_exp_taylor(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = phi.norm_squared();
    let real = 1.0 - theta2 / 8.0;
    let imag = 0.5 - theta2 / 48.0;
    renormalize(Quaternion::from_parts(real, imag * phi))
}

pub(crate) fn so3_exp_general(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    let half = 0.5 * theta;
    let imag = if theta == 0.0 { 0.5 } else { half.sin() / theta };
    renormalize(Quaternion::from_parts(half.cos(), imag * phi))
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonical_quaternion(q);
    let v = q.imag();
    let w = q.w;
    let n = v.norm();
    if 2.0 * n < SMALL_ANGLE {
        so3_log_taylor(&v, w)
    } else {
        so3_log_general(&v, w)
    }
}

pub(crate) fn so3_log_taylor(v: &Vector3<f64>, w: f64) -> Vector3<f64> {
    // atan(n / w) / n = (1 - n^2 / (3 w^2)) / w for small n
    let n2 = v.norm_squared();
    v * (2.0 / w) * (1.0 - n2 / (3.0 * w * w))
}

pub(crate) fn so3_log_general(v: &Vector3<f64>, w: f64) -> Vector3<f64> {
    let n = v.norm();
    if n == 0.0 {
        return Vector3::zeros();
    }
    let theta = 2.0 * n.atan2(w);
    v * (theta / n)
}

/// Picks one of `q` / `-q`: nonnegative scalar part, or near a half turn the
/// sign making the first nonzero of `(qx, qy, qz, qw)` positive.
fn canonical_quaternion(q: &UnitQuaternion<f64>) -> Quaternion<f64> {
    let q = *q.quaternion();
    let near_pi_w = (0.5 * NEAR_PI_MARGIN).sin();
    if q.w.abs() <= near_pi_w {
        let first = [q.i, q.j, q.k, q.w]
            .into_iter()
            .find(|c| *c != 0.0)
            .unwrap_or(1.0);
        if first < 0.0 {
            return -q;
        }
        q
    } else if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Coefficients `(1 - cos t) / t^2` and `(t - sin t) / t^3`.
fn jacobian_coefficients(theta: f64) -> (f64, f64) {
    if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        let s = (0.5 * theta).sin();
        (2.0 * s * s / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = jacobian_coefficients(phi.norm());
    let k = hat(phi);
    Matrix3::identity() + a * k + b * k * k
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let d = if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / t2
    };
    let k = hat(phi);
    Matrix3::identity() - 0.5 * k + d * k * k
}

/// Off-diagonal block coupling rotation and translation in the SE(3) left
/// Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < JACOBIAN_SERIES_ANGLE {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    0.5 * r + c1 * (pr + rp + prp) + c2 * (p * pr + rp * p - 3.0 * prp) + c3 * (prp * p + p * prp)
}

/// SE(3) left Jacobian: `exp(xi + d) ~ exp(J(xi) d) * exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out
}

/// Inverse of [`se3_left_jacobian`], used to linearize `log(exp(d) * T)`.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jinv = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-jinv * q * jinv));
    out
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}
