//! Rotations, rigid transforms, the fisheye camera model and covariance helpers.
//!
//! Conventions used across the crate:
//! - world frame is z-up with gravity along −z;
//! - quaternions are Hamilton, scalar-first, and rotate body vectors into the
//!   world frame (`v_world = q * v_body`);
//! - gate frames have x along the gate normal (race direction) and z up.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Standard gravity magnitude, m/s².
pub const GRAVITY: f64 = 9.81;

/// Gravity vector in the world frame.
pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential of a rotation vector.
pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// SO(3) logarithm; the result has norm in `[0, π]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    // Pick the hemisphere with w >= 0 so the angle stays in [0, π].
    let q = if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    };
    q.scaled_axis()
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k
        + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Advances `q` by the body rate `omega` held constant for `dt` seconds.
pub fn quat_integrate(
    q: &UnitQuaternion<f64>,
    omega: &Vector3<f64>,
    dt: f64,
) -> UnitQuaternion<f64> {
    debug_assert!(dt >= 0.0);
    let mut out = q * so3_exp(&(omega * dt));
    out.renormalize();
    out
}

/// Rotation-level equality: `q` and `−q` are the same rotation.
pub fn same_rotation(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, tol: f64) -> bool {
    a.angle_to(b) <= tol
}

/// Heading of a rotation: the yaw of its body x axis projected on the world xy plane.
pub fn yaw_of(q: &UnitQuaternion<f64>) -> f64 {
    let x = q * Vector3::x();
    x.y.atan2(x.x)
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a =
        (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Rigid transform `target ← source`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Translation distance and rotation angle between two poses.
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        (
            (self.translation - other.translation).norm(),
            self.rotation.angle_to(&other.rotation),
        )
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("distortion inversion did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("pixel ({0}, {1}) lies outside the image")]
    OutsideImage(f64, f64),
    #[error("invalid intrinsics: {0}")]
    Invalid(String),
    #[error("cannot read intrinsics: {0}")]
    Io(String),
}

/// Kannala-Brandt equidistant fisheye intrinsics with four radial coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k: [f64; 4],
    pub width: u32,
    pub height: u32,
}

/// Iteration cap and angular tolerance of the distortion inversion.
pub const UNPROJECT_MAX_ITERS: usize = 20;
pub const UNPROJECT_TOL: f64 = 1e-12;

impl Default for FisheyeIntrinsics {
    /// T265-class lens. Configurable; not calibrated values of any specific unit.
    fn default() -> Self {
        Self {
            fx: 285.7,
            fy: 285.8,
            cx: 424.0,
            cy: 400.0,
            k: [-0.0066, 0.0418, -0.0396, 0.0068],
            width: 848,
            height: 800,
        }
    }
}

impl FisheyeIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::Invalid(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64)
        {
            return Err(CameraError::Invalid(format!(
                "principal point ({}, {}) outside image",
                self.cx, self.cy
            )));
        }
        if self.k.iter().any(|k| !k.is_finite()) {
            return Err(CameraError::Invalid(
                "non-finite distortion coefficient".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, CameraError> {
        let k: Self = serde_json::from_str(s).map_err(|e| CameraError::Io(e.to_string()))?;
        k.validate()?;
        Ok(k)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CameraError> {
        let s =
            std::fs::read_to_string(path.as_ref()).map_err(|e| CameraError::Io(e.to_string()))?;
        Self::from_json_str(&s)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width as f64 && px.y <= self.height as f64
    }

    /// Distorted angle `θ_d(θ)`.
    pub fn distort_angle(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    fn distort_angle_derivative(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    pub fn project(&self, x_cam: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if x_cam.z <= 0.0 {
            return Err(CameraError::BehindCamera(x_cam.z));
        }
        let r = x_cam.x.hypot(x_cam.y);
        if r == 0.0 {
            return Ok(Vector2::new(self.cx, self.cy));
        }
        let theta = r.atan2(x_cam.z);
        let scale = self.distort_angle(theta) / r;
        Ok(Vector2::new(
            self.fx * x_cam.x * scale + self.cx,
            self.fy * x_cam.y * scale + self.cy,
        ))
    }

    pub fn unproject(&self, px: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        self.unproject_counted(px).map(|(ray, _)| ray)
    }

    /// Unprojects a pixel to a unit bearing and reports the Newton iterations used.
    pub fn unproject_counted(
        &self,
        px: &Vector2<f64>,
    ) -> Result<(Vector3<f64>, usize), CameraError> {
        if !self.contains(px) {
            return Err(CameraError::OutsideImage(px.x, px.y));
        }
        let mx = (px.x - self.cx) / self.fx;
        let my = (px.y - self.cy) / self.fy;
        let theta_d = mx.hypot(my);
        if theta_d == 0.0 {
            return Ok((Vector3::z(), 0));
        }
        let mut theta = theta_d;
        let mut converged = false;
        let mut iters = 0;
        while iters < UNPROJECT_MAX_ITERS {
            iters += 1;
            let d = self.distort_angle_derivative(theta);
            if !(d > 0.0) {
                break;
            }
            let step = (self.distort_angle(theta) - theta_d) / d;
            theta -= step;
            if !theta.is_finite() || theta < 0.0 {
                break;
            }
            if step.abs() < UNPROJECT_TOL {
                converged = true;
                break;
            }
        }
        if !converged || theta >= std::f64::consts::FRAC_PI_2 {
            return Err(CameraError::NoConvergence(iters));
        }
        let (s, c) = theta.sin_cos();
        Ok((Vector3::new(s * mx / theta_d, s * my / theta_d, c), iters))
    }

    /// Pinhole projection with the same focal lengths and principal point
    /// (the undistorted image).
    pub fn project_pinhole(&self, x_cam: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if x_cam.z <= 0.0 {
            return Err(CameraError::BehindCamera(x_cam.z));
        }
        Ok(Vector2::new(
            self.fx * x_cam.x / x_cam.z + self.cx,
            self.fy * x_cam.y / x_cam.z + self.cy,
        ))
    }

    /// Maps a distorted fisheye pixel to the undistorted pinhole image.
    pub fn undistort_pixel(&self, px: &Vector2<f64>) -> Result<Vector2<f64>, CameraError> {
        let ray = self.unproject(px)?;
        self.project_pinhole(&ray)
    }
}

/// Averages `m` with its transpose.
pub fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    let s = symmetrize(m);
    nalgebra::DMatrix::from_column_slice(N, N, s.as_slice())
        .symmetric_eigenvalues()
        .min()
}

/// Symmetric within `1e-10` and minimum eigenvalue at least `−1e-10`.
pub fn is_covariance<const N: usize>(m: &SMatrix<f64, N, N>) -> bool {
    (m - m.transpose()).amax() <= 1e-10 && min_eigenvalue(m) >= -1e-10
}
