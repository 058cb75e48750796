//! Rigid poses, the pinhole camera, and the patch reprojection chain.
//!
//! Poses map world coordinates into the camera frame (`X_c = R * X_w + t`).
//! Increments are applied on the left: `retract(T, delta) = exp(delta) * T`,
//! with the tangent ordered as `[translation; rotation]`.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points closer than this to the camera plane are not projectable.
pub const Z_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("inverse depth must be positive and finite, got {0}")]
    InvalidInverseDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// World-to-camera rigid transform. The quaternion is stored scalar-last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from scalar-last quaternion components `[qx, qy, qz, qw]`.
    pub fn from_parts(q: [f64; 4], t: [f64; 3]) -> Self {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        Self::new(
            UnitQuaternion::from_quaternion(quat),
            Vector3::new(t[0], t[1], t[2]),
        )
    }

    /// Scalar-last quaternion components `[qx, qy, qz, qw]`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self * other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Se3Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }

    /// Group exponential of a tangent vector `[rho; phi]`.
    pub fn exp(delta: &Vector6<f64>) -> Self {
        let rho = Vector3::new(delta[0], delta[1], delta[2]);
        let phi = Vector3::new(delta[3], delta[4], delta[5]);
        let rotation = UnitQuaternion::from_scaled_axis(phi);
        let translation = left_jacobian_so3(&phi) * rho;
        Self::new(rotation, translation)
    }

    /// Group logarithm, inverse of [`Se3Pose::exp`] for rotation angles below pi.
    pub fn log(&self) -> Vector6<f64> {
        let phi = self.rotation.scaled_axis();
        let v_inv = left_jacobian_so3(&phi)
            .try_inverse()
            .unwrap_or_else(Matrix3::identity);
        let rho = v_inv * self.translation;
        Vector6::new(rho[0], rho[1], rho[2], phi[0], phi[1], phi[2])
    }
}

impl std::ops::Mul for Se3Pose {
    type Output = Se3Pose;

    fn mul(self, rhs: Se3Pose) -> Se3Pose {
        self.compose(&rhs)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let n = q.quaternion().norm();
    if (n - 1.0).abs() > 1e-12 {
        UnitQuaternion::new_normalize(*q.quaternion())
    } else {
        q
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn left_jacobian_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    if theta2 < 1e-10 {
        // Taylor expansion around zero.
        Matrix3::identity() + 0.5 * k + k2 / 6.0
    } else {
        let theta = theta2.sqrt();
        let a = (1.0 - theta.cos()) / theta2;
        let b = (theta - theta.sin()) / (theta2 * theta);
        Matrix3::identity() + a * k + b * k2
    }
}

/// `retract(pose, delta) = exp(delta) * pose`.
pub fn se3_retract(pose: &Se3Pose, delta: &Vector6<f64>) -> Se3Pose {
    Se3Pose::exp(delta).compose(pose)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
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
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0
            && px.v >= 0.0
            && px.u <= (self.width - 1) as f64
            && px.v <= (self.height - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

fn check_inv_depth(inv_depth: f64) -> Result<(), GeometryError> {
    if inv_depth > 0.0 && inv_depth.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::InvalidInverseDepth(inv_depth))
    }
}

/// Normalized viewing ray `((u - cx)/fx, (v - cy)/fy, 1)`.
fn ray(intr: &CameraIntrinsics, px: &Pixel) -> Vector3<f64> {
    Vector3::new((px.u - intr.cx) / intr.fx, (px.v - intr.cy) / intr.fy, 1.0)
}

pub fn backproject(
    intr: &CameraIntrinsics,
    px: &Pixel,
    inv_depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    check_inv_depth(inv_depth)?;
    Ok(ray(intr, px) / inv_depth)
}

pub fn project(intr: &CameraIntrinsics, point: &Vector3<f64>) -> Result<Pixel, GeometryError> {
    let z = point[2];
    if !(z > Z_MIN) {
        return Err(GeometryError::BehindCamera(z));
    }
    Ok(Pixel::new(
        intr.fx * point[0] / z + intr.cx,
        intr.fy * point[1] / z + intr.cy,
    ))
}

fn projection_jacobian(intr: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p[2];
    let iz2 = iz * iz;
    Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * p[0] * iz2,
        0.0,
        intr.fy * iz,
        -intr.fy * p[1] * iz2,
    )
}

/// Pixel of patch `px` (inverse depth `inv_depth` in frame i) as seen from frame j.
pub fn reproject(
    pose_i: &Se3Pose,
    pose_j: &Se3Pose,
    intr: &CameraIntrinsics,
    px: &Pixel,
    inv_depth: f64,
) -> Result<Pixel, GeometryError> {
    let x_i = backproject(intr, px, inv_depth)?;
    let rel = pose_j.compose(&pose_i.inverse());
    project(intr, &rel.transform_point(&x_i))
}

/// Reprojection together with its derivatives with respect to left
/// perturbations of both poses and the inverse depth.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionJacobians {
    pub pixel: Pixel,
    /// Point in camera j.
    pub point_j: Vector3<f64>,
    pub d_pose_i: SMatrix<f64, 2, 6>,
    pub d_pose_j: SMatrix<f64, 2, 6>,
    pub d_inv_depth: Vector2<f64>,
}

pub fn reproject_with_jacobians(
    pose_i: &Se3Pose,
    pose_j: &Se3Pose,
    intr: &CameraIntrinsics,
    px: &Pixel,
    inv_depth: f64,
) -> Result<ReprojectionJacobians, GeometryError> {
    let x_i = backproject(intr, px, inv_depth)?;
    let rel = pose_j.compose(&pose_i.inverse());
    let x_j = rel.transform_point(&x_i);
    let pixel = project(intr, &x_j)?;
    let jp = projection_jacobian(intr, &x_j);
    let r_rel = rel.rotation_matrix();

    // d x_j / d delta_j = [I, -[x_j]x]
    let mut dxj_dj = SMatrix::<f64, 3, 6>::zeros();
    dxj_dj.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dxj_dj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&x_j)));

    // x_j = R_rel exp(-delta_i) x_i + t_rel, so d x_j / d delta_i = -R_rel [I, -[x_i]x]
    let mut dxj_di = SMatrix::<f64, 3, 6>::zeros();
    dxj_di.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_rel));
    dxj_di
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(r_rel * skew(&x_i)));

    let dxj_dd = -(r_rel * ray(intr, px)) / (inv_depth * inv_depth);

    Ok(ReprojectionJacobians {
        pixel,
        point_j: x_j,
        d_pose_i: jp * dxj_di,
        d_pose_j: jp * dxj_dj,
        d_inv_depth: jp * dxj_dd,
    })
}
