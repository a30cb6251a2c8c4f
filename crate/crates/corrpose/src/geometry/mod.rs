//! Core geometric types: rigid poses, pinhole intrinsics, point clouds,
//! triangle meshes, oriented boxes, and the object-frame canonicalization
//! procedure used to define a natural object coordinate frame from a set
//! of reference views.

use nalgebra::{Matrix3, Point3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod frame;
mod views;

pub use frame::{canonicalize_frame, fit_oriented_box, optical_axes_intersection, CanonicalFrame};
pub use views::{
    crop_from_box, crop_intrinsics, crop_pixel_map, hemisphere_pose, look_at_origin,
    sample_hemisphere_poses,
};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Pt3 = Point3<f64>;

/// Orthonormality tolerance for rotation matrices.
pub const ROT_TOL: f64 = 1e-9;

/// Rigid transform mapping object-frame points into the camera frame:
/// `x_cam = R * x_obj + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    /// Build a pose, checking that `rotation` is a proper rotation
    /// (orthonormal, determinant +1) within [`ROT_TOL`].
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let rtr = rotation.transpose() * rotation;
        let ortho_err = (rtr - Mat3::identity()).norm();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > ROT_TOL * 10.0 || det_err > ROT_TOL * 10.0 {
            return Err(Error::invalid(
                "pose rotation",
                format!("not orthonormal: |R'R-I|={ortho_err:.3e}, |det-1|={det_err:.3e}"),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Internal constructor for rotations produced by exact algebra
    /// (compositions, exponentials). Debug-asserts validity.
    pub(crate) fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        debug_assert!((rotation.determinant() - 1.0).abs() < 1e-6);
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn transform_point(&self, p: &Pt3) -> Pt3 {
        Pt3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in the object frame (`-R' t`).
    pub fn camera_center(&self) -> Pt3 {
        Pt3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Optical-axis direction expressed in the object frame.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::z()
    }

    /// Re-project the rotation onto SO(3) via SVD. Used after long chains
    /// of incremental updates.
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::from_parts(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

/// Rotation matrix from a scaled axis (Rodrigues vector).
pub fn rotation_exp(omega: &Vec3) -> Mat3 {
    Rotation3::from_scaled_axis(*omega).into_inner()
}

/// Geodesic distance between two rotations, in degrees.
pub fn rotation_geodesic_deg(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Pinhole camera intrinsics. Pixel centers sit at half-integer coordinates:
/// pixel (i, j) covers [i, i+1) x [j, j+1) with center (i+0.5, j+0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid("intrinsics", "focal lengths must be > 0"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("intrinsics", "resolution must be >= 1"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Project a camera-frame point; `None` when at or behind the camera.
    pub fn project_camera(&self, pc: &Vec3) -> Option<Vec2> {
        if pc.z <= BEHIND_CAMERA_EPS {
            return None;
        }
        Some(Vec2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    /// Unit-norm viewing ray through pixel `(u, v)`, in the camera frame.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    pub fn contains_pixel(&self, p: &Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

pub const BEHIND_CAMERA_EPS: f64 = 1e-9;

/// Pinhole projection of an object-frame point. `None` flags a point at or
/// behind the camera plane (`Zc <= 1e-9`).
pub fn project(x: &Pt3, pose: &Pose, k: &Intrinsics) -> Option<Vec2> {
    let pc = pose.rotation * x.coords + pose.translation;
    k.project_camera(&pc)
}

/// Unordered 3D point set, optionally colored.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Pt3>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Pt3>) -> Self {
        Self {
            points,
            colors: None,
        }
    }

    pub fn with_colors(points: Vec<Pt3>, colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.len() != points.len() {
            return Err(Error::invalid(
                "point cloud",
                format!("{} colors for {} points", colors.len(), points.len()),
            ));
        }
        Ok(Self {
            points,
            colors: Some(colors),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Pt3 {
        let mut acc = Vec3::zeros();
        for p in &self.points {
            acc += p.coords;
        }
        Pt3::from(acc / self.points.len().max(1) as f64)
    }

    /// Largest pairwise distance. Exact, O(n^2); intended for model clouds.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.points.len() {
            for j in (i + 1)..self.points.len() {
                best = best.max((self.points[i] - self.points[j]).norm());
            }
        }
        best
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            colors: self.colors.clone(),
        }
    }
}

/// Indexed triangle mesh with per-vertex color.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub vertices: Vec<Pt3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Vec<[f32; 3]>,
}

impl TriangleMesh {
    /// Builds a mesh, validating indices and dropping degenerate
    /// (zero-area) faces.
    pub fn new(vertices: Vec<Pt3>, faces: Vec<[u32; 3]>, colors: Vec<[f32; 3]>) -> Result<Self> {
        if colors.len() != vertices.len() {
            return Err(Error::invalid(
                "mesh",
                format!("{} colors for {} vertices", colors.len(), vertices.len()),
            ));
        }
        let n = vertices.len() as u32;
        let mut clean = Vec::with_capacity(faces.len());
        for f in faces {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::invalid(
                    "mesh",
                    format!("face index {:?} out of range ({n} vertices)", f),
                ));
            }
            let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
            let area2 = (b - a).cross(&(c - a)).norm();
            if area2 > 1e-15 {
                clean.push(f);
            }
        }
        Ok(Self {
            vertices,
            faces: clean,
            colors,
        })
    }

    pub fn vertex_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.vertices.clone(),
            colors: Some(self.colors.clone()),
        }
    }

    pub fn diameter(&self) -> f64 {
        self.vertex_cloud().diameter()
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| pose.transform_point(p)).collect(),
            faces: self.faces.clone(),
            colors: self.colors.clone(),
        }
    }
}

/// Oriented bounding box. Columns of `axes` are the box axes, ordered by
/// descending half-extent; the triple is right-handed.
#[derive(Debug, Clone, Copy)]
pub struct OrientedBox {
    pub center: Pt3,
    pub axes: Mat3,
    pub half_extents: Vec3,
}

impl OrientedBox {
    /// Box-frame coordinates of `p` scaled to [-1, 1]^3 on the box surface.
    pub fn normalize(&self, p: &Pt3) -> Vec3 {
        let local = self.axes.transpose() * (p - self.center);
        Vec3::new(
            local.x / self.half_extents.x.max(1e-12),
            local.y / self.half_extents.y.max(1e-12),
            local.z / self.half_extents.z.max(1e-12),
        )
    }

    pub fn contains(&self, p: &Pt3, tol: f64) -> bool {
        let local = self.axes.transpose() * (p - self.center);
        local.x.abs() <= self.half_extents.x + tol
            && local.y.abs() <= self.half_extents.y + tol
            && local.z.abs() <= self.half_extents.z + tol
    }
}

/// Axis-aligned 2D box in pixel coordinates, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2 {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox2 {
    pub fn from_points<I: IntoIterator<Item = Vec2>>(pts: I) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = it.next()?;
        let mut b = BBox2 {
            x0: first.x,
            y0: first.y,
            x1: first.x,
            y1: first.y,
        };
        for p in it {
            b.x0 = b.x0.min(p.x);
            b.y0 = b.y0.min(p.y);
            b.x1 = b.x1.max(p.x);
            b.y1 = b.y1.max(p.y);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn intersects(&self, other: &BBox2) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}
