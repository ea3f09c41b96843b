//! Rigid-body math on SE(3), the pinhole camera model and pixel/point
//! conversions shared by every other module.
//!
//! Twists are ordered translational part first: `(rho, omega)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Below this rotation angle the exponential and logarithm switch to series.
const SMALL_ANGLE: f64 = 1e-8;
/// Jacobian coefficients lose precision earlier than exp/log ones.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;
/// Rotation angles this close to pi have no unique logarithm.
const PI_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} is at pi; logarithm is not unique")]
    DegenerateRotation(f64),
    #[error("point has non-positive depth z = {0}")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("pixel ({0}, {1}) outside the image")]
    OutOfImage(f64, f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Skew-symmetric cross-product matrix.
#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    w.cross_matrix()
}

/// Inverse of [`hat`].
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A tangent vector of SE(3): `(rho, omega)`, metres then radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rho: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self(Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z))
    }

    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self(Vector6::from_column_slice(v))
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Rotation by `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation(so3_exp(&(axis.normalize() * angle)))
    }

    pub fn from_quaternion(t: Vector3<f64>, q: &UnitQuaternion<f64>) -> Self {
        Self::new(*q.to_rotation_matrix().matrix(), t)
    }

    /// Unit quaternion with non-negative scalar part.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(Quaternion::new(-q.w, -q.i, -q.j, -q.k))
        } else {
            q
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        so3_angle(&self.rotation)
    }

    /// Left-multiplicative update `exp(delta) * self`, the convention used by
    /// frame-to-model tracking.
    pub fn perturb_left(&self, delta: &Twist) -> Pose {
        se3_exp(delta).compose(self)
    }

    /// Right-multiplicative update `self * exp(delta)`, the convention used by
    /// pose-graph states and edge measurements.
    pub fn perturb_right(&self, delta: &Twist) -> Pose {
        self.compose(&se3_exp(delta))
    }

    /// Deviation of the rotation from orthonormality, `||R^T R - I||_max`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max()
    }

    /// Projects the rotation back onto SO(3) via polar decomposition.
    pub fn renormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose::new(r, self.translation)
    }

    /// Translation and rotation-angle distance between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let d = self.inverse().compose(other);
        ((self.translation - other.translation).norm(), d.rotation_angle())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn so3_angle(r: &Matrix3<f64>) -> f64 {
    let s = vee(&(r - r.transpose())).norm() * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / theta_sq)
    };
    let k = hat(w);
    Matrix3::identity() + a * k + b * k * k
}

/// Rotation logarithm; fails at an angle of exactly pi.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let sin_axis = vee(&(r - r.transpose())) * 0.5;
    let s = sin_axis.norm();
    let c = (r.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        // sin(theta)/theta ~ 1 - theta^2/6
        return Ok(sin_axis * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta < PI_TOLERANCE {
        return Err(GeometryError::DegenerateRotation(theta));
    }
    if theta < 3.0 {
        return Ok(sin_axis * (theta / s));
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part and the sign from the antisymmetric one.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let outer = sym / (1.0 - c);
    let mut best = 0;
    for i in 1..3 {
        if outer[(i, i)] > outer[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = outer.column(best).into_owned() / outer[(best, best)].sqrt();
    if axis.dot(&sin_axis) < 0.0 {
        axis = -axis;
    }
    Ok(axis.normalize() * theta)
}

/// Coefficients `(A, B, C)` of `sin t / t`, `(1 - cos t)/t^2`, `(t - sin t)/t^3`.
fn rodrigues_coefficients(theta_sq: f64) -> (f64, f64, f64) {
    let theta = theta_sq.sqrt();
    if theta < SMALL_ANGLE {
        return (
            1.0 - theta_sq / 6.0,
            0.5 - theta_sq / 24.0,
            1.0 / 6.0 - theta_sq / 120.0,
        );
    }
    let s = theta.sin();
    let half = (0.5 * theta).sin();
    let b = 2.0 * half * half / theta_sq;
    // t - sin t cancels badly for small t
    let c = if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0
    } else {
        (theta - s) / (theta_sq * theta)
    };
    (s / theta, b, c)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let (_, b, c) = if theta_sq.sqrt() < JACOBIAN_SERIES_ANGLE {
        (
            1.0,
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
            1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0,
        )
    } else {
        rodrigues_coefficients(theta_sq)
    };
    let k = hat(w);
    Matrix3::identity() + b * k + c * k * k
}

/// Inverse of the left Jacobian of SO(3).
pub fn so3_left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let d = if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta_sq
    };
    let k = hat(w);
    Matrix3::identity() - 0.5 * k + d * k * k
}

/// Exponential map of SE(3): Rodrigues rotation and the SO(3) left Jacobian
/// applied to the translational part.
pub fn se3_exp(xi: &Twist) -> Pose {
    let rho = xi.rho();
    let w = xi.omega();
    let (a, b, c) = rodrigues_coefficients(w.norm_squared());
    let k = hat(&w);
    let k2 = k * k;
    let r = Matrix3::identity() + a * k + b * k2;
    let v = Matrix3::identity() + b * k + c * k2;
    Pose::new(r, v * rho)
}

/// Logarithm of SE(3); inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(pose: &Pose) -> Result<Twist, GeometryError> {
    let w = so3_log(&pose.rotation)?;
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = hat(&w);
    let d = if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta_sq
    };
    let v_inv = Matrix3::identity() - 0.5 * k + d * k * k;
    Ok(Twist::new(v_inv * pose.translation, w))
}

/// Adjoint of `pose`: `exp(Adj * xi) = pose * exp(xi) * pose^-1`.
pub fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(hat(&pose.translation) * r));
    m
}

/// The translational coupling block of the SE(3) left Jacobian.
fn se3_q_matrix(rho: &Vector3<f64>, w: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let (c1, c2, c3) = if theta < JACOBIAN_SERIES_ANGLE {
        (
            1.0 / 6.0 - theta_sq / 120.0,
            1.0 / 24.0 - theta_sq / 720.0,
            1.0 / 120.0 - theta_sq / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta_sq * theta;
        (
            (theta - s) / t3,
            (theta_sq + 2.0 * c - 2.0) / (2.0 * theta_sq * theta_sq),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t3 * theta_sq),
        )
    };
    let p = hat(rho);
    let k = hat(w);
    let kp = k * p;
    let pk = p * k;
    let kpk = kp * k;
    let kk = k * k;
    0.5 * p + c1 * (kp + pk + kpk) + c2 * (kk * p + pk * k - 3.0 * kpk)
        + c3 * (kpk * k + k * kpk)
}

/// Left Jacobian of SE(3).
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let w = xi.omega();
    let jl = so3_left_jacobian(&w);
    let q = se3_q_matrix(&xi.rho(), &w);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m
}

/// Inverse of the SE(3) right Jacobian: `log(exp(xi) exp(d)) ~ xi + Jr^-1 d`.
pub fn se3_right_jacobian_inverse(xi: &Twist) -> Matrix6<f64> {
    let neg = Twist(-xi.0);
    let w = neg.omega();
    let jl_inv = so3_left_jacobian_inverse(&w);
    let q = se3_q_matrix(&neg.rho(), &w);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-jl_inv * q * jl_inv));
    m
}

/// Least-squares rigid transform taking `src` onto `dst` (centroid
/// alignment plus SVD of the cross-covariance, reflection-corrected).
/// Rank-deficient inputs yield one of the equally good solutions.
pub fn align_points(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    assert_eq!(src.len(), dst.len());
    assert!(!src.is_empty());
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (b - cd) * (a - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    Pose::new(r, cd - r * cs)
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// The intrinsics of the image downsampled by two per axis.
    pub fn half(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx + 0.5) * 0.5 - 0.5,
            cy: (self.cy + 0.5) * 0.5 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K * pi(p)`; rejects points with `z <= 0`.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 || p.z.is_nan() {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// `d * K^-1 [u, 1]`.
    pub fn backproject(&self, u: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(GeometryError::InvalidDepth(depth));
        }
        if !self.contains(u) {
            return Err(GeometryError::OutOfImage(u.x, u.y));
        }
        Ok(self.backproject_unchecked(u.x, u.y, depth))
    }

    #[inline]
    pub fn backproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Pixel coordinates inside `[0, width) x [0, height)`.
    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }

    /// Nearest integer pixel for a projected point, if inside the image.
    #[inline]
    pub fn pixel_of(&self, u: &Vector2<f64>) -> Option<(usize, usize)> {
        let x = (u.x + 0.5).floor();
        let y = (u.y + 0.5).floor();
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }

    /// Unit-z ray direction through pixel centre `(x, y)` in the camera frame.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let rho = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        Twist::new(rho, axis * rng.random_range(0.0..max_angle))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn exp_pure_translation_and_rotation() {
        let p = se3_exp(&Twist::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(p.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(p.rotation, Matrix3::identity());

        let p = se3_exp(&Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation - expected).abs().max() < 1e-15);
        assert!(p.translation.norm() < 1e-15);
    }

    #[test]
    fn log_examples() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
        let t = se3_log(&Pose::from_translation(Vector3::new(0.0, 2.0, 0.0))).unwrap();
        assert!((t.0 - Vector6::new(0.0, 2.0, 0.0, 0.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn log_at_pi_is_degenerate() {
        let p = Pose::from_axis_angle(&Vector3::x(), std::f64::consts::PI);
        assert!(matches!(
            se3_log(&p),
            Err(GeometryError::DegenerateRotation(_))
        ));
    }

    #[test]
    fn log_near_pi_round_trips() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let xi = Twist::new(Vector3::new(0.3, 0.1, -0.2), axis * 3.1);
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert!((back.0 - xi.0).norm() < 1e-9);
    }

    #[test]
    fn exp_log_round_trip_small_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, 0.5);
            let back = se3_log(&se3_exp(&xi)).unwrap();
            assert!((back.0 - xi.0).norm() < 1e-9);
        }
    }

    #[test]
    fn tiny_rotation_series_branch() {
        let xi = Twist::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1e-10, -2e-10, 3e-11));
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert!((back.0 - xi.0).norm() < 1e-15);
    }

    #[test]
    fn adjoint_examples() {
        assert_eq!(adjoint(&Pose::identity()), Matrix6::identity());
        let r = Pose::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.7);
        let a = adjoint(&r);
        assert!((a.fixed_view::<3, 3>(0, 0) - r.rotation).abs().max() < 1e-15);
        assert!((a.fixed_view::<3, 3>(3, 3) - r.rotation).abs().max() < 1e-15);
        assert!(a.fixed_view::<3, 3>(0, 3).abs().max() < 1e-15);
        assert!(a.fixed_view::<3, 3>(3, 0).abs().max() < 1e-15);
    }

    #[test]
    fn adjoint_defining_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = se3_exp(&random_twist(&mut rng, 3.0));
            let xi = random_twist(&mut rng, 1.0);
            let lhs = se3_exp(&Twist(adjoint(&p) * xi.0));
            let rhs = p * se3_exp(&xi) * p.inverse();
            assert!((lhs.rotation - rhs.rotation).abs().max() < 1e-9);
            assert!((lhs.translation - rhs.translation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for max_angle in [1e-5, 0.5, 2.5] {
            for _ in 0..20 {
                let xi = random_twist(&mut rng, max_angle);
                let base = se3_exp(&xi);
                let analytic = se3_right_jacobian_inverse(&xi);
                let h = 1e-6;
                for j in 0..6 {
                    let mut d = Vector6::zeros();
                    d[j] = h;
                    let plus = se3_log(&base.perturb_right(&Twist(d))).unwrap();
                    let minus = se3_log(&base.perturb_right(&Twist(-d))).unwrap();
                    let col = (plus.0 - minus.0) / (2.0 * h);
                    assert!(
                        (col - analytic.column(j)).norm() < 1e-6,
                        "angle {max_angle} column {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn left_jacobian_is_inverse_of_inverse() {
        let xi = Twist::new(Vector3::new(0.4, -0.1, 0.2), Vector3::new(0.3, 0.9, -0.4));
        let jl = se3_left_jacobian(&xi);
        let jr_inv_neg = se3_right_jacobian_inverse(&Twist(-xi.0));
        assert!((jl * jr_inv_neg - Matrix6::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let k = k();
        let u = k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(u, Vector2::new(320.0, 240.0));
        let u = k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(u.x, 570.0);
        assert!(k.project(&Vector3::new(0.0, 0.0, 0.0)).is_err());
        assert!(k.project(&Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn backprojection_examples() {
        let k = k();
        let p = k.backproject(&Vector2::new(320.0, 240.0), 2.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let p = k.backproject(&Vector2::new(570.0, 240.0), 2.0).unwrap();
        assert_eq!(p, Vector3::new(1.0, 0.0, 2.0));
        assert!(matches!(
            k.backproject(&Vector2::new(10.0, 10.0), 0.0),
            Err(GeometryError::InvalidDepth(_))
        ));
        assert!(k.backproject(&Vector2::new(10.0, 10.0), f64::NAN).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let u = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let d = rng.random_range(0.2..8.0);
            let p = k.backproject(&u, d).unwrap();
            assert!((k.project(&p).unwrap() - u).norm() < 1e-9);
            let back = k.backproject(&k.project(&p).unwrap(), p.z).unwrap();
            assert!((back - p).norm() < 1e-9);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let p = Pose::new(
            so3_exp(&Vector3::new(0.2, -1.0, 0.4)),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let q = p.quaternion();
        assert!(q.w >= 0.0);
        let back = Pose::from_quaternion(p.translation, &q);
        assert!((back.rotation - p.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = Pose::identity();
        for _ in 0..1000 {
            p = p * se3_exp(&random_twist(&mut rng, 3.0));
        }
        assert!(p.orthonormality_error() < 1e-9);
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn compose_with_inverse_is_identity(
            a in proptest::array::uniform6(-2.0f64..2.0),
        ) {
            let p = se3_exp(&Twist::from_slice(&a));
            let i = p * p.inverse();
            proptest::prop_assert!((i.rotation - Matrix3::identity()).abs().max() < 1e-9);
            proptest::prop_assert!(i.translation.norm() < 1e-9);
        }

        #[test]
        fn adjoint_is_a_homomorphism(
            a in proptest::array::uniform6(-2.0f64..2.0),
            b in proptest::array::uniform6(-2.0f64..2.0),
        ) {
            let p1 = se3_exp(&Twist::from_slice(&a));
            let p2 = se3_exp(&Twist::from_slice(&b));
            let d = adjoint(&(p1 * p2)) - adjoint(&p1) * adjoint(&p2);
            proptest::prop_assert!(d.abs().max() < 1e-9);
        }

        #[test]
        fn composition_is_associative(
            a in proptest::array::uniform6(-2.0f64..2.0),
            b in proptest::array::uniform6(-2.0f64..2.0),
            c in proptest::array::uniform6(-2.0f64..2.0),
        ) {
            let (p, q, r) = (
                se3_exp(&Twist::from_slice(&a)),
                se3_exp(&Twist::from_slice(&b)),
                se3_exp(&Twist::from_slice(&c)),
            );
            let d1 = (p * q) * r;
            let d2 = p * (q * r);
            proptest::prop_assert!((d1.rotation - d2.rotation).abs().max() < 1e-9);
            proptest::prop_assert!((d1.translation - d2.translation).abs().max() < 1e-9);
        }
    }
}
