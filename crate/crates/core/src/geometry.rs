//! SE(3) rigid-body algebra and the pinhole camera model.
//!
//! Rotations are stored as unit quaternions and renormalized after every
//! composition. Tangent-space increments are right-multiplicative
//! (`P <- P * exp(delta)`); twists are ordered `[rotation; translation]`.

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

/// Tangent-space element: `[wx, wy, wz, tx, ty, tz]` (radians, meters).
pub type Twist6 = Vector6<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth {0} (must be positive and finite)")]
    InvalidDepth(f64),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("log map near singularity (rotation angle {0} too close to pi)")]
    LogNearPi(f64),
    #[error("invalid camera intrinsics: {0}")]
    BadIntrinsics(String),
}

/// Continuous pixel coordinate, origin at the top-left, center-of-pixel convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelCoord) -> f64 {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

/// Pinhole intrinsics (no distortion).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    pub fn contains(&self, p: &PixelCoord) -> bool {
        p.u >= 0.0 && p.u < self.width as f64 && p.v >= 0.0 && p.v < self.height as f64
    }
}

/// Rigid-body transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> SE3Pose {
        let rot_inv = self.rotation.inverse();
        SE3Pose::new(rot_inv, -(rot_inv * self.translation))
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Exponential map se(3) -> SE(3).
    pub fn exp(twist: &Twist6) -> SE3Pose {
        let omega = Vector3::new(twist[0], twist[1], twist[2]);
        let rho = Vector3::new(twist[3], twist[4], twist[5]);
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        let translation = so3_left_jacobian(&omega) * rho;
        SE3Pose::new(rotation, translation)
    }

    /// Logarithm map SE(3) -> se(3). Rejected near rotation angle pi.
    pub fn log(&self) -> Result<Twist6, GeometryError> {
        let angle = self.rotation.angle();
        if angle >= std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::LogNearPi(angle));
        }
        let omega = self.rotation.scaled_axis();
        let rho = so3_left_jacobian_inv(&omega) * self.translation;
        let mut t = Twist6::zeros();
        t.fixed_rows_mut::<3>(0).copy_from(&omega);
        t.fixed_rows_mut::<3>(3).copy_from(&rho);
        Ok(t)
    }

    /// Adjoint matrix: `exp(adjoint(T) * xi) = T * exp(xi) * T^-1`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let mut adj = Matrix6::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        adj
    }

    /// Distance to another pose as (rotation angle, translation norm) of the delta.
    pub fn delta_norms(&self, other: &SE3Pose) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.rotation_angle(), d.translation.norm())
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3) (the V matrix coupling rotation into translation).
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * w + w * w / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity()
        + ((1.0 - theta.cos()) / t2) * w
        + ((theta - theta.sin()) / (t2 * theta)) * (w * w)
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() - 0.5 * w + w * w / 12.0;
    }
    let half = 0.5 * theta;
    let coeff = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
    Matrix3::identity() - 0.5 * w + coeff * (w * w)
}

/// Coupling block of the SE(3) left Jacobian for a twist `[omega; rho]`.
fn se3_q_block(omega: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    let p = skew(rho);
    let (a, b, c) = if theta < 1e-4 {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            -1.0 / 24.0 + t2 / 720.0,
            -1.0 / 120.0 + t2 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            (theta - theta.sin()) / (t2 * theta),
            (1.0 - t2 / 2.0 - theta.cos()) / t4,
            (theta - theta.sin() - t2 * theta / 6.0) / (t4 * theta),
        )
    };
    let wp = w * p;
    let pw = p * w;
    let wpw = wp * w;
    0.5 * p + a * (wp + pw + wpw) - b * (w * wp + pw * w - 3.0 * wpw)
        - 0.5 * (b - 3.0 * c) * (wpw * w + w * wpw)
}

/// Inverse left Jacobian of SE(3) for twist order `[omega; rho]`.
pub fn se3_left_jacobian_inv(twist: &Twist6) -> Matrix6<f64> {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let rho = Vector3::new(twist[3], twist[4], twist[5]);
    let j_inv = so3_left_jacobian_inv(&omega);
    let q = se3_q_block(&omega, &rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-j_inv * q * j_inv));
    out
}

/// Inverse right Jacobian of SE(3): `Jr(xi)^-1 = Jl(-xi)^-1`.
pub fn se3_right_jacobian_inv(twist: &Twist6) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-twist))
}

/// Back-projects a pixel with depth into the camera frame (pinhole inverse).
pub fn back_project(
    u: &PixelCoord,
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(Point3::new(
        (u.u - k.cx) / k.fx * depth,
        (u.v - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Projects `T * x` onto the image plane. `T` is the transform taking the
/// point into the camera frame (world-to-camera when `x` is a world point).
pub fn project(t: &SE3Pose, x: &Point3, k: &CameraIntrinsics) -> Result<PixelCoord, GeometryError> {
    let p = t.transform_point(x);
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok(PixelCoord::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Relative transform `t_n^-1 * t_j` between two poses (loop-constraint form).
pub fn relative_constraint(t_n: &SE3Pose, t_j: &SE3Pose) -> SE3Pose {
    t_n.inverse().compose(t_j)
}
