//! Coordinate frames, rigid transforms, pinhole projection and ray casting
//! onto the road surface.
//!
//! The world frame is a single Cartesian frame: `x` runs along the lower
//! roadway's driving direction, `y` is lateral and `z` points up. The road
//! surface is the plane `z = 0`.
//!
//! Camera frames follow the usual computer-vision convention: `X` right,
//! `Y` down, `Z` along the optical axis. Image coordinates have `u` to the
//! right and `v` down with the origin in the top-left corner, so the lower
//! edge of a box is its maximum `v`.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in the global world frame (meters).
pub type WorldPoint = Point3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;
/// Rays whose downward component is smaller than this never reach the road.
const HORIZON_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("all cuboid corners lie behind the camera")]
    FullyBehind,
    #[error("ray does not intersect the ground plane in front of the camera")]
    NoIntersection,
    #[error("rotation is not a proper orthonormal matrix")]
    InvalidRotation,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform from a raw 3x3 matrix, rejecting anything that is
    /// not orthonormal with determinant +1.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.abs().max() > ORTHONORMAL_TOL || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self::from_parts(Rotation3::identity(), t)
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation_vector(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &WorldPoint) -> WorldPoint {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Applies `t` to `p`.
pub fn transform_point(t: &RigidTransform, p: &WorldPoint) -> WorldPoint {
    t.transform_point(p)
}

/// Camera-to-world rotation for a camera mounted with the given yaw
/// (about world `z`, 0 = looking along `+x`), pitch (positive tilts the
/// optical axis down) and roll (about the optical axis), all in radians.
pub fn camera_rotation(yaw: f64, pitch: f64, roll: f64) -> Rotation3<f64> {
    // camera X -> world -y, camera Y -> world -z, camera Z -> world +x
    let base = Rotation3::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    ));
    Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), pitch)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), roll)
        * base
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width && self.cy > 0.0 && self.cy < self.height) {
            return Err(GeometryError::InvalidIntrinsics("principal point must lie inside the image"));
        }
        Ok(())
    }
}

/// Pinhole camera with a camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub pose: RigidTransform,
    world_to_camera: RigidTransform,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, pose: RigidTransform) -> Result<Self, GeometryError> {
        intrinsics.validate()?;
        Ok(Self {
            intrinsics,
            pose,
            world_to_camera: pose.inverse(),
        })
    }

    pub fn center(&self) -> WorldPoint {
        Point3::from(*self.pose.translation_vector())
    }

    pub fn to_camera(&self, p: &WorldPoint) -> Point3<f64> {
        self.world_to_camera.transform_point(p)
    }

    /// World-frame direction of the ray through pixel `(u, v)` (not normalized).
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.pose.transform_vector(&dir_cam)
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= self.intrinsics.width && v >= 0.0 && v <= self.intrinsics.height
    }
}

/// Axis-aligned image rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl ImageBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self {
            u_min: u_min.min(u_max),
            v_min: v_min.min(v_max),
            u_max: u_min.max(u_max),
            v_max: v_min.max(v_max),
        }
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            u_min: self.u_min.clamp(0.0, width),
            v_min: self.v_min.clamp(0.0, height),
            u_max: self.u_max.clamp(0.0, width),
            v_max: self.v_max.clamp(0.0, height),
        }
    }

    pub fn intersection_area(&self, other: &ImageBox) -> f64 {
        let w = self.u_max.min(other.u_max) - self.u_min.max(other.u_min);
        let h = self.v_max.min(other.v_max) - self.v_min.max(other.v_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Pixel that is cast onto the road: the midpoint of the lower edge.
    pub fn lower_edge_midpoint(&self) -> (f64, f64) {
        (0.5 * (self.u_min + self.u_max), self.v_max)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.u_min, self.v_min, self.u_max, self.v_max]
    }
}

/// The road surface `z = 0` with unit normal `+z`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroundPlane;

impl GroundPlane {
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::z()
    }

    /// Intersects the ray `origin + s * dir`, `s > 0`, with the plane.
    pub fn intersect(&self, origin: &WorldPoint, dir: &Vector3<f64>) -> Result<WorldPoint, GeometryError> {
        if dir.z > -HORIZON_EPS {
            return Err(GeometryError::NoIntersection);
        }
        let s = -origin.z / dir.z;
        if s <= 0.0 {
            return Err(GeometryError::NoIntersection);
        }
        let p = origin + dir * s;
        Ok(Point3::new(p.x, p.y, 0.0))
    }
}

/// Projects a world point to pixel coordinates. The result may fall
/// outside the image; callers clip.
pub fn project_point(cam: &CameraModel, p: &WorldPoint) -> Result<(f64, f64), GeometryError> {
    let pc = cam.to_camera(p);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let k = &cam.intrinsics;
    Ok((k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

/// Image footprint of a vehicle cuboid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox {
    /// Hull clipped to the image rectangle.
    pub clipped: ImageBox,
    /// Hull before clipping.
    pub full: ImageBox,
    /// The hull does not overlap the image at all.
    pub out_of_view: bool,
    /// Some corners were behind the camera and left out of the hull.
    pub partially_behind: bool,
}

impl ProjectedBox {
    /// Share of the unclipped hull that remains inside the image.
    pub fn visible_fraction(&self) -> f64 {
        let full = self.full.area();
        if self.out_of_view {
            0.0
        } else if full <= 0.0 {
            1.0
        } else {
            self.clipped.area() / full
        }
    }
}

/// Axis-aligned hull of the projected corners that lie in front of the camera.
pub fn project_vehicle_to_box(cam: &CameraModel, corners: &[WorldPoint; 8]) -> Result<ProjectedBox, GeometryError> {
    let mut u_min = f64::INFINITY;
    let mut v_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    let mut visible = 0;
    for c in corners {
        if let Ok((u, v)) = project_point(cam, c) {
            visible += 1;
            u_min = u_min.min(u);
            v_min = v_min.min(v);
            u_max = u_max.max(u);
            v_max = v_max.max(v);
        }
    }
    if visible == 0 {
        return Err(GeometryError::FullyBehind);
    }
    let full = ImageBox { u_min, v_min, u_max, v_max };
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let out_of_view = u_max < 0.0 || v_max < 0.0 || u_min > w || v_min > h;
    Ok(ProjectedBox {
        clipped: full.clip(w, h),
        full,
        out_of_view,
        partially_behind: visible < 8,
    })
}

/// Casts the ray through an arbitrary pixel onto the road.
pub fn backproject_pixel(cam: &CameraModel, u: f64, v: f64) -> Result<WorldPoint, GeometryError> {
    GroundPlane.intersect(&cam.center(), &cam.pixel_ray(u, v))
}

/// Road position of a detection: the ray through the lower-edge midpoint
/// of `bbox` intersected with `z = 0`.
pub fn backproject_box(cam: &CameraModel, bbox: &ImageBox) -> Result<WorldPoint, GeometryError> {
    let (u, v) = bbox.lower_edge_midpoint();
    backproject_pixel(cam, u, v)
}

/// Corners of an upright box standing on the road. `heading` is the yaw of
/// the long axis in radians.
pub fn vehicle_cuboid(center: Point2<f64>, heading: f64, length: f64, width: f64, height: f64) -> [WorldPoint; 8] {
    let (s, c) = heading.sin_cos();
    let fwd = Vector3::new(c, s, 0.0) * (0.5 * length);
    let side = Vector3::new(-s, c, 0.0) * (0.5 * width);
    let base = Point3::new(center.x, center.y, 0.0);
    let mut out = [base; 8];
    let mut i = 0;
    for z in [0.0, height] {
        for a in [-1.0, 1.0] {
            for b in [-1.0, 1.0] {
                out[i] = base + fwd * a + side * b + Vector3::new(0.0, 0.0, z);
                i += 1;
            }
        }
    }
    out
}

/// Area of a simple polygon (shoelace).
pub fn polygon_area(points: &[Point2<f64>]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, p) in points.iter().enumerate() {
        let q = &points[(i + 1) % points.len()];
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc.abs()
}

/// Road-surface region seen by the camera, truncated at `max_range` meters
/// (horizontal distance from the camera). Image border pixels whose rays
/// miss the road or land beyond the range are pulled in to the range limit.
pub fn ground_footprint(cam: &CameraModel, max_range: f64, samples_per_edge: usize) -> Vec<Point2<f64>> {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let n = samples_per_edge.max(2);
    let mut border = Vec::with_capacity(4 * n);
    for i in 0..n {
        border.push((w * i as f64 / n as f64, h));
    }
    for i in 0..n {
        border.push((w, h - h * i as f64 / n as f64));
    }
    for i in 0..n {
        border.push((w - w * i as f64 / n as f64, 0.0));
    }
    for i in 0..n {
        border.push((0.0, h * i as f64 / n as f64));
    }
    let origin = cam.center();
    border
        .into_iter()
        .map(|(u, v)| {
            let dir = cam.pixel_ray(u, v);
            let horiz = Vector3::new(dir.x, dir.y, 0.0);
            let horiz_norm = horiz.norm().max(1e-12);
            let far = Point2::new(origin.x + horiz.x / horiz_norm * max_range, origin.y + horiz.y / horiz_norm * max_range);
            match GroundPlane.intersect(&origin, &dir) {
                Ok(p) => {
                    let d = ((p.x - origin.x).powi(2) + (p.y - origin.y).powi(2)).sqrt();
                    if d > max_range {
                        far
                    } else {
                        Point2::new(p.x, p.y)
                    }
                }
                Err(_) => far,
            }
        })
        .collect()
}
