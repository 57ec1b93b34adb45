//! Rigid-body transforms and their tangent space.
//!
//! Tangent vectors are ordered `[v; ω]`: translational part first, rotational
//! part second. Every increment is applied on the left (`exp(ξ) ∘ G`), and the
//! Jacobians in [`crate::camera`] are written for that convention.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::Se3Error;

/// Below this rotation angle the exp/log coefficients switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Largest rotation angle accepted by [`PoseSE3::log`].
pub const MAX_LOG_ANGLE: f64 = std::f64::consts::PI - 1e-6;

/// Element of the Lie algebra se(3), stored as `[v; ω]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Self(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self(Vector6::from_column_slice(v))
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist(self.0 + rhs.0)
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist(self.0 - rhs.0)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist(-self.0)
    }
}

impl Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist(self.0 * s)
    }
}

/// 6×6 adjoint representation acting on `[v; ω]` twists.
pub type AdjointMatrix = Matrix6<f64>;

/// Rigid-body transform `X ↦ R·X + t`.
///
/// Inside the optimizer a pose maps world coordinates into the camera frame,
/// so `G_j ∘ G_i⁻¹` carries points from camera `i` to camera `j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for PoseSE3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "SE3(t: [{:.6}, {:.6}, {:.6}], q: [{:.6}, {:.6}, {:.6}, {:.6}])",
            self.translation.x, self.translation.y, self.translation.z, q.i, q.j, q.k, q.w
        )
    }
}

/// Skew-symmetric matrix such that `hat(a) * b == a × b`.
pub fn hat(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

fn so3_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (real, imag_scale) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    let v = omega * imag_scale;
    UnitQuaternion::new_normalize(Quaternion::new(real, v.x, v.y, v.z))
}

/// Returns (ω, θ) with the quaternion taken in the hemisphere w ≥ 0.
fn so3_log(q: &UnitQuaternion<f64>) -> (Vector3<f64>, f64) {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    let theta = 2.0 * n.atan2(w);
    if n < 0.5 * SMALL_ANGLE {
        // θ/n ≈ 2/w · (1 − n²/(3w²))
        let scale = 2.0 / w * (1.0 - n * n / (3.0 * w * w));
        (v * scale, theta)
    } else {
        (v * (theta / n), theta)
    }
}

/// Left Jacobian of SO(3); maps `v` to the translation of `exp([v; ω])`.
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let w = hat(omega);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        let s = (0.5 * theta).sin();
        (2.0 * s * s / theta_sq, (theta - theta.sin()) / (theta_sq * theta))
    };
    Matrix3::identity() + w * b + w * w * c
}

fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let w = hat(omega);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta_sq
    };
    Matrix3::identity() - w * 0.5 + w * w * d
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a quaternion given as `(qx, qy, qz, qw)`; the quaternion is normalized.
    pub fn from_quaternion_xyzw(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let rotation = UnitQuaternion::new_normalize(Quaternion::new(q[3], q[0], q[1], q[2]));
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_parts(UnitQuaternion::identity(), t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).1
    }

    /// SE(3) exponential (closed-form Rodrigues).
    pub fn exp(xi: &Twist) -> Self {
        let omega = xi.rotation();
        let rotation = so3_exp(&omega);
        let translation = so3_left_jacobian(&omega) * xi.translation();
        Self {
            rotation,
            translation,
        }
    }

    /// SE(3) logarithm. Rotations too close to π have no unique logarithm and are rejected.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let (omega, theta) = so3_log(&self.rotation);
        if !(theta < MAX_LOG_ANGLE) {
            return Err(Se3Error::DegenerateRotation { angle: theta });
        }
        let v = so3_left_jacobian_inv(&omega) * self.translation;
        Ok(Twist::new(v, omega))
    }

    /// `self ∘ other`; the result rotation is renormalized.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        PoseSE3 {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rinv = self.rotation.inverse();
        PoseSE3 {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Acts on a homogeneous point; `W` is carried through unchanged.
    pub fn act(&self, x: &Vector4<f64>) -> Vector4<f64> {
        let p = self.rotation * x.xyz() + self.translation * x.w;
        Vector4::new(p.x, p.y, p.z, x.w)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `Adj(g)` with `g ∘ exp(ξ) ∘ g⁻¹ = exp(Adj(g)·ξ)`.
    pub fn adjoint(&self) -> AdjointMatrix {
        let r = self.rotation_matrix();
        let tr = hat(&self.translation) * r;
        let mut adj = Matrix6::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        adj
    }

    /// Left retraction: `exp(dxi) ∘ self`.
    pub fn retract(&self, dxi: &Twist) -> PoseSE3 {
        PoseSE3::exp(dxi).compose(self)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Quaternion as `(qx, qy, qz, qw)`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|x| x.is_finite())
            && self.rotation.coords.iter().all(|x| x.is_finite())
    }
}

/// Retraction as a free function, mirroring the pose update of the optimizer.
pub fn retract(g: &PoseSE3, dxi: &Twist) -> PoseSE3 {
    g.retract(dxi)
}
