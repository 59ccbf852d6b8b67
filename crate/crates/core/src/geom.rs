//! Camera models, rigid poses, projection and back-projection, oriented-box
//! collision, and the shared smooth-L1 kernel.
//!
//! Frame conventions used throughout the workspace:
//! the world frame is right-handed with +z up and the ground plane at z = 0;
//! the camera frame has +z forward, +x right, +y down. Rotations are stored
//! as unit quaternions; file formats that want angles use ZYX yaw/pitch/roll.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

/// Minimum camera-frame depth for a point to count as "in front".
pub const DEPTH_EPS: f64 = 1e-6;
/// Below this |ray . normal| a viewing ray is treated as parallel to a plane.
pub const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("point is behind the camera (z = {z:.6} m)")]
    PointBehindCamera { z: f64 },
    #[error("viewing ray is parallel to the plane")]
    RayParallelToPlane,
    #[error("ray/plane intersection lies behind the camera")]
    IntersectionBehindCamera,
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Rigid transform, applied as `x' = R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
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

    /// Build from ZYX Euler angles: `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_euler_angles(roll, pitch, yaw),
            translation,
        }
    }

    /// ZYX Euler angles as `(yaw, pitch, roll)`.
    pub fn yaw_pitch_roll(&self) -> (f64, f64, f64) {
        let (roll, pitch, yaw) = self.rotation.euler_angles();
        (yaw, pitch, roll)
    }

    /// `self` after `other`: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Geodesic rotation distance to another pose, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Euclidean translation distance to another pose, in meters.
    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Pinhole intrinsics in pixels; `skew` is almost always zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            skew: 0.0,
        }
    }

    pub fn with_skew(mut self, skew: f64) -> Self {
        self.skew = skew;
        self
    }

    /// 3x3 calibration matrix.
    pub fn k_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        )
    }

    /// Normalized camera-frame ray direction through a pixel (unit length,
    /// positive z).
    pub fn pixel_ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let my = (pixel.y - self.cy) / self.fy;
        let mx = (pixel.x - self.cx - self.skew * my) / self.fx;
        Vector3::new(mx, my, 1.0).normalize()
    }

    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < f64::from(self.width)
            && pixel.y < f64::from(self.height)
    }
}

/// Camera placement as a world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    pub world_to_camera: Pose,
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self {
            world_to_camera: Pose::identity(),
        }
    }

    pub fn new(world_to_camera: Pose) -> Self {
        Self { world_to_camera }
    }

    /// Camera center expressed in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.world_to_camera.invert().translation
    }

    /// Place a camera at `eye` looking at `target`, with world +z as the up
    /// reference. Camera axes: +x right, +y down, +z forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let world_up = Vector3::new(0.0, 0.0, 1.0);
        let mut right = forward.cross(&world_up);
        if right.norm() < 1e-12 {
            // Looking straight up/down; pick an arbitrary horizontal right.
            right = Vector3::new(1.0, 0.0, 0.0);
        } else {
            right = right.normalize();
        }
        let down = forward.cross(&right).normalize();
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&rot);
        let translation = -(rotation * eye);
        Self {
            world_to_camera: Pose::new(rotation, translation),
        }
    }
}

/// Plane `{ x : normal . x = offset }` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    /// Normalizes the normal (and rescales the offset accordingly).
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        let n = normal.norm();
        assert!(n > 1e-12, "plane normal must be nonzero");
        Self {
            normal: normal / n,
            offset: offset / n,
        }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Box with arbitrary orientation; `half_extents` are along its local axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl OrientedBox {
    pub fn new(center: Vector3<f64>, half_extents: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            center,
            half_extents,
            rotation,
        }
    }

    /// Grow every half extent by `margin` on each side.
    pub fn inflated(&self, margin: f64) -> OrientedBox {
        OrientedBox {
            center: self.center,
            half_extents: self.half_extents + Vector3::repeat(margin),
            rotation: self.rotation,
        }
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.half_extents;
        let mut out = [Vector3::zeros(); 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *corner = self.center + self.rotation * Vector3::new(sx * h.x, sy * h.y, sz * h.z);
        }
        out
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rotation.inverse() * (p - self.center);
        local.x.abs() <= self.half_extents.x
            && local.y.abs() <= self.half_extents.y
            && local.z.abs() <= self.half_extents.z
    }
}

/// Project a world point; returns pixel coordinates and camera-frame depth.
/// The pixel may lie outside the image bounds; callers clip.
pub fn project(
    point: &Vector3<f64>,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
) -> Result<(Vector2<f64>, f64), GeomError> {
    let p = e.world_to_camera.transform_point(point);
    if p.z <= DEPTH_EPS {
        return Err(GeomError::PointBehindCamera { z: p.z });
    }
    let inv_z = 1.0 / p.z;
    let u = k.fx * p.x * inv_z + k.skew * p.y * inv_z + k.cx;
    let v = k.fy * p.y * inv_z + k.cy;
    Ok((Vector2::new(u, v), p.z))
}

/// Intersect the viewing ray through `pixel` with `plane`, in world space.
pub fn backproject_to_plane(
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
    e: &CameraExtrinsics,
    plane: &Plane,
) -> Result<Vector3<f64>, GeomError> {
    let cam_in_world = e.world_to_camera.invert();
    let origin = cam_in_world.translation;
    let dir = cam_in_world.rotation * k.pixel_ray(pixel);
    let denom = plane.normal.dot(&dir);
    if denom.abs() <= RAY_EPS {
        return Err(GeomError::RayParallelToPlane);
    }
    let s = (plane.offset - plane.normal.dot(&origin)) / denom;
    // pixel_ray is unit with positive camera z, so s > 0 iff in front.
    if s <= DEPTH_EPS {
        return Err(GeomError::IntersectionBehindCamera);
    }
    Ok(origin + dir * s)
}

/// The world ground plane z = 0 with unit +z normal. The extrinsics argument
/// pins the convention to a camera without affecting the result.
pub fn ground_plane_from_extrinsics(_e: &CameraExtrinsics) -> Plane {
    Plane {
        normal: Vector3::new(0.0, 0.0, 1.0),
        offset: 0.0,
    }
}

/// Separating-axis intersection test over the 15 candidate axes.
/// Touching faces count as intersecting.
pub fn obb_intersect(a: &OrientedBox, b: &OrientedBox) -> bool {
    let ra = a.rotation.to_rotation_matrix();
    let rb = b.rotation.to_rotation_matrix();
    // Rotation from B's frame into A's frame, and |R| padded against
    // near-parallel edge pairs.
    let r = ra.matrix().transpose() * rb.matrix();
    let t = ra.matrix().transpose() * (b.center - a.center);
    let mut abs_r = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            abs_r[(i, j)] = r[(i, j)].abs() + 1e-12;
        }
    }
    let ea = a.half_extents;
    let eb = b.half_extents;

    // A's face axes.
    for i in 0..3 {
        let rb_proj = eb.x * abs_r[(i, 0)] + eb.y * abs_r[(i, 1)] + eb.z * abs_r[(i, 2)];
        if t[i].abs() > ea[i] + rb_proj {
            return false;
        }
    }
    // B's face axes.
    for j in 0..3 {
        let ra_proj = ea.x * abs_r[(0, j)] + ea.y * abs_r[(1, j)] + ea.z * abs_r[(2, j)];
        let t_proj = t.x * r[(0, j)] + t.y * r[(1, j)] + t.z * r[(2, j)];
        if t_proj.abs() > ra_proj + eb[j] {
            return false;
        }
    }
    // Cross products of edge axes.
    for i in 0..3 {
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        for j in 0..3 {
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            let ra_proj = ea[i1] * abs_r[(i2, j)] + ea[i2] * abs_r[(i1, j)];
            let rb_proj = eb[j1] * abs_r[(i, j2)] + eb[j2] * abs_r[(i, j1)];
            let t_proj = t[i2] * r[(i1, j)] - t[i1] * r[(i2, j)];
            if t_proj.abs() > ra_proj + rb_proj {
                return false;
            }
        }
    }
    true
}

/// Mean smooth-L1: `f(d) = 0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64, GeomError> {
    if pred.len() != target.len() {
        return Err(GeomError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_term(p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

#[inline]
pub(crate) fn smooth_l1_term(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Derivative of the smooth-L1 kernel with respect to `d`.
#[inline]
pub(crate) fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
