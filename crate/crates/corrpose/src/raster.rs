//! Software triangle rasterizer.
//!
//! Produces per-pixel object-frame coordinates, camera-frame depth, a
//! binary mask and vertex-interpolated color. Visibility is pure z-buffer
//! (no back-face culling: reconstructed meshes may be non-orientable), no
//! anti-aliasing, pixel centers at half-integer coordinates. Interpolation
//! is perspective-correct, so the coordinate map reprojects onto the pixel
//! grid to well under half a pixel.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{BBox2, Intrinsics, PointCloud, Pose, Pt3, TriangleMesh, Vec3};
use crate::img::{Buffer2, CoordMap, MaskImage, RgbImage, ScalarImage};

/// Coordinate-map sentinel for unmasked pixels (kept NaN-free so buffers
/// stay serializable and comparable).
pub const COORD_SENTINEL: f32 = 1e30;

const NEAR_PLANE: f64 = 1e-6;

/// Output of [`render`].
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    /// Object-frame 3D coordinate per pixel; `COORD_SENTINEL` when unmasked.
    pub coords: CoordMap,
    /// Camera-frame Z per pixel; `+inf` when unmasked.
    pub depth: ScalarImage,
    pub mask: MaskImage,
    /// Interpolated vertex color, `[0,1]`; zero when unmasked.
    pub color: RgbImage,
}

impl RenderBuffers {
    fn empty(width: usize, height: usize) -> Self {
        Self {
            coords: CoordMap::filled(width, height, [COORD_SENTINEL; 3]),
            depth: ScalarImage::filled(width, height, f32::INFINITY),
            mask: MaskImage::filled(width, height, false),
            color: RgbImage::filled(width, height, [0.0; 3]),
        }
    }
}

/// Multi-object render: shared z-buffer plus a per-pixel instance index
/// (`-1` where no surface is visible). Coordinates are in each instance's
/// own object frame.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub buffers: RenderBuffers,
    pub instance: Buffer2<i32>,
}

impl SceneRender {
    /// Mask of pixels won by one instance.
    pub fn instance_mask(&self, id: i32) -> MaskImage {
        MaskImage {
            width: self.instance.width,
            height: self.instance.height,
            data: self.instance.data.iter().map(|&v| v == id).collect(),
        }
    }
}

#[derive(Clone, Copy)]
struct ClipVertex {
    cam: Vec3,
    attr: [f64; 6], // object-frame position (3) + color (3)
}

fn lerp_vertex(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    let mut attr = [0.0; 6];
    for i in 0..6 {
        attr[i] = a.attr[i] + t * (b.attr[i] - a.attr[i]);
    }
    ClipVertex {
        cam: a.cam + t * (b.cam - a.cam),
        attr,
    }
}

/// Renders a single object; see [`render_scene`] for multiple.
pub fn render(mesh: &TriangleMesh, pose: &Pose, k: &Intrinsics) -> RenderBuffers {
    render_scene(&[(mesh, *pose)], k).buffers
}

pub fn render_scene(objects: &[(&TriangleMesh, Pose)], k: &Intrinsics) -> SceneRender {
    let (w, h) = (k.width, k.height);
    let mut out = SceneRender {
        buffers: RenderBuffers::empty(w, h),
        instance: Buffer2::filled(w, h, -1),
    };
    let mut poly = Vec::with_capacity(4);
    let mut clipped = Vec::with_capacity(4);
    for (id, (mesh, pose)) in objects.iter().enumerate() {
        for face in &mesh.faces {
            poly.clear();
            for &vi in face {
                let x = mesh.vertices[vi as usize];
                let c = mesh.colors[vi as usize];
                poly.push(ClipVertex {
                    cam: pose.rotation * x.coords + pose.translation,
                    attr: [x.x, x.y, x.z, c[0] as f64, c[1] as f64, c[2] as f64],
                });
            }
            clip_near(&poly, &mut clipped);
            for t in 1..clipped.len().saturating_sub(1) {
                raster_triangle(
                    &clipped[0],
                    &clipped[t],
                    &clipped[t + 1],
                    k,
                    id as i32,
                    &mut out,
                );
            }
        }
    }
    out
}

/// Clips a camera-space triangle against the near plane `z > NEAR_PLANE`;
/// yields a convex polygon with 0..=4 vertices.
fn clip_near(tri: &[ClipVertex], out: &mut Vec<ClipVertex>) {
    out.clear();
    for i in 0..tri.len() {
        let a = &tri[i];
        let b = &tri[(i + 1) % tri.len()];
        let a_in = a.cam.z > NEAR_PLANE;
        let b_in = b.cam.z > NEAR_PLANE;
        if a_in {
            out.push(*a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.cam.z) / (b.cam.z - a.cam.z);
            out.push(lerp_vertex(a, b, t));
        }
    }
}

#[inline]
fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

fn raster_triangle(
    v0: &ClipVertex,
    v1: &ClipVertex,
    v2: &ClipVertex,
    k: &Intrinsics,
    instance: i32,
    out: &mut SceneRender,
) {
    let sx = |v: &ClipVertex| k.fx * v.cam.x / v.cam.z + k.cx;
    let sy = |v: &ClipVertex| k.fy * v.cam.y / v.cam.z + k.cy;
    let (x0, y0) = (sx(v0), sy(v0));
    let (x1, y1) = (sx(v1), sy(v1));
    let (x2, y2) = (sx(v2), sy(v2));

    let mut area = edge(x0, y0, x1, y1, x2, y2);
    if area.abs() < 1e-12 {
        return;
    }
    // Normalize winding instead of culling.
    let (x1, y1, x2, y2, v1, v2) = if area < 0.0 {
        area = -area;
        (x2, y2, x1, y1, v2, v1)
    } else {
        (x1, y1, x2, y2, v1, v2)
    };

    let min_x = x0.min(x1).min(x2).floor().max(0.0) as usize;
    let max_x = (x0.max(x1).max(x2).ceil() as i64).clamp(0, k.width as i64) as usize;
    let min_y = y0.min(y1).min(y2).floor().max(0.0) as usize;
    let max_y = (y0.max(y1).max(y2).ceil() as i64).clamp(0, k.height as i64) as usize;
    if min_x >= max_x && min_y >= max_y && (min_x >= k.width || min_y >= k.height) {
        return;
    }

    let iz = [1.0 / v0.cam.z, 1.0 / v1.cam.z, 1.0 / v2.cam.z];
    let inv_area = 1.0 / area;

    for py in min_y..max_y.min(k.height) {
        let cy = py as f64 + 0.5;
        for px in min_x..max_x.min(k.width) {
            let cx = px as f64 + 0.5;
            let w0 = edge(x1, y1, x2, y2, cx, cy);
            let w1 = edge(x2, y2, x0, y0, cx, cy);
            let w2 = edge(x0, y0, x1, y1, cx, cy);
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let l = [w0 * inv_area, w1 * inv_area, w2 * inv_area];
            let izp = l[0] * iz[0] + l[1] * iz[1] + l[2] * iz[2];
            let z = 1.0 / izp;
            let idx = out.buffers.depth.idx(px, py);
            if (z as f32) < out.buffers.depth.data[idx] {
                let mut attr = [0.0f64; 6];
                for c in 0..6 {
                    attr[c] = (l[0] * v0.attr[c] * iz[0]
                        + l[1] * v1.attr[c] * iz[1]
                        + l[2] * v2.attr[c] * iz[2])
                        * z;
                }
                out.buffers.depth.data[idx] = z as f32;
                out.buffers.coords.data[idx] = [attr[0] as f32, attr[1] as f32, attr[2] as f32];
                out.buffers.color.data[idx] = [
                    (attr[3] as f32).clamp(0.0, 1.0),
                    (attr[4] as f32).clamp(0.0, 1.0),
                    (attr[5] as f32).clamp(0.0, 1.0),
                ];
                out.buffers.mask.data[idx] = true;
                out.instance.data[idx] = instance;
            }
        }
    }
}

/// Aggregates masked coordinates over several renders into a point cloud,
/// voxel-downsampled to at most `max_points`. The representative of each
/// voxel is the rendered point nearest the voxel center, so output points
/// lie on the surface.
pub fn extract_point_cloud(
    mesh: &TriangleMesh,
    poses: &[Pose],
    k: &Intrinsics,
    max_points: usize,
) -> Result<PointCloud> {
    if poses.is_empty() || max_points == 0 {
        return Err(Error::invalid("extract", "need >= 1 pose and max_points >= 1"));
    }
    let mut pts: Vec<(Pt3, [f32; 3])> = Vec::new();
    for pose in poses {
        let rb = render(mesh, pose, k);
        for i in 0..rb.mask.data.len() {
            if rb.mask.data[i] {
                let c = rb.coords.data[i];
                pts.push((Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64), rb.color.data[i]));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if pts.len() <= max_points {
        let (points, colors) = pts.into_iter().unzip();
        return PointCloud::with_colors(points, colors);
    }

    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for (p, _) in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let diag = (hi - lo).norm().max(1e-9);

    let bucket = |voxel: f64| -> BTreeMap<(i64, i64, i64), (usize, f64)> {
        // Voxel key -> (representative, squared distance to voxel center).
        let mut grid: BTreeMap<(i64, i64, i64), (usize, f64)> = BTreeMap::new();
        for (i, (p, _)) in pts.iter().enumerate() {
            let key = (
                ((p.x - lo.x) / voxel).floor() as i64,
                ((p.y - lo.y) / voxel).floor() as i64,
                ((p.z - lo.z) / voxel).floor() as i64,
            );
            let center = Pt3::new(
                lo.x + (key.0 as f64 + 0.5) * voxel,
                lo.y + (key.1 as f64 + 0.5) * voxel,
                lo.z + (key.2 as f64 + 0.5) * voxel,
            );
            let d2 = (p - center).norm_squared();
            match grid.get_mut(&key) {
                Some(slot) => {
                    if d2 < slot.1 {
                        *slot = (i, d2);
                    }
                }
                None => {
                    grid.insert(key, (i, d2));
                }
            }
        }
        grid
    };

    // Bisect the voxel size so the count approaches max_points from below.
    let mut v_lo = diag / (pts.len() as f64).cbrt().max(1.0) / 8.0; // likely too fine
    let mut v_hi = diag / (max_points as f64).cbrt().max(1.0);
    while bucket(v_hi).len() > max_points {
        v_hi *= 1.5;
    }
    let mut best = None;
    for _ in 0..16 {
        let mid = 0.5 * (v_lo + v_hi);
        let grid = bucket(mid);
        if grid.len() <= max_points {
            v_hi = mid;
            let good_enough = grid.len() as f64 >= 0.75 * max_points as f64;
            best = Some(grid);
            if good_enough {
                break;
            }
        } else {
            v_lo = mid;
        }
    }
    let grid = best.unwrap_or_else(|| bucket(v_hi));

    let mut points = Vec::with_capacity(grid.len());
    let mut colors = Vec::with_capacity(grid.len());
    for (_, (i, _)) in grid {
        points.push(pts[i].0);
        colors.push(pts[i].1);
    }
    PointCloud::with_colors(points, colors)
}

/// Tight pixel bounding box of the rendered mask.
pub fn render_gt_bbox(mesh: &TriangleMesh, pose: &Pose, k: &Intrinsics) -> Result<BBox2> {
    let rb = render(mesh, pose, k);
    mask_bbox(&rb.mask)
}

/// Pixel-area bounding box of a mask: `[x0, x1) x [y0, y1)` covering every
/// set pixel.
pub fn mask_bbox(mask: &MaskImage) -> Result<BBox2> {
    let (x0, y0, x1, y1) = mask.bounds().ok_or(Error::EmptyMask)?;
    Ok(BBox2 {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: (x1 + 1) as f64,
        y1: (y1 + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_exp, Pose, Vec3};

    fn default_k(res: usize) -> Intrinsics {
        let f = res as f64 * 1.2;
        Intrinsics::new(f, f, res as f64 / 2.0, res as f64 / 2.0, res, res).unwrap()
    }

    fn big_triangle() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Pt3::new(-1.0, -1.0, 0.0),
                Pt3::new(1.0, -1.0, 0.1),
                Pt3::new(0.0, 1.2, -0.1),
            ],
            vec![[0, 1, 2]],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn behind_camera_renders_empty() {
        let mesh = big_triangle();
        let pose = Pose::from_parts(nalgebra::Matrix3::identity(), Vec3::new(0.0, 0.0, -3.0));
        let rb = render(&mesh, &pose, &default_k(64));
        assert_eq!(rb.mask.count(), 0);
        assert!(rb.depth.data.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn coords_reproject_to_pixel_centers() {
        let mesh = big_triangle();
        let pose = Pose::from_parts(
            rotation_exp(&Vec3::new(0.2, -0.3, 0.1)),
            Vec3::new(0.05, -0.02, 2.5),
        );
        let k = default_k(96);
        let rb = render(&mesh, &pose, &k);
        assert!(rb.mask.count() > 500);
        for y in 0..96 {
            for x in 0..96 {
                if !rb.mask.at(x, y) {
                    continue;
                }
                let c = rb.coords.at(x, y);
                let p = Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64);
                let px = project(&p, &pose, &k).expect("rendered point must be in front");
                let dx = px.x - (x as f64 + 0.5);
                let dy = px.y - (y as f64 + 0.5);
                assert!(
                    dx.hypot(dy) <= 0.5,
                    "pixel ({x},{y}) reprojects {dx:.4},{dy:.4} away"
                );
            }
        }
    }

    #[test]
    fn constant_depth_plane() {
        // Fronto-parallel square at z = 2.0.
        let z0 = 2.0;
        let mesh = TriangleMesh::new(
            vec![
                Pt3::new(-0.5, -0.5, z0),
                Pt3::new(0.5, -0.5, z0),
                Pt3::new(0.5, 0.5, z0),
                Pt3::new(-0.5, 0.5, z0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![[0.5; 3]; 4],
        )
        .unwrap();
        let rb = render(&mesh, &Pose::identity(), &default_k(64));
        assert!(rb.mask.count() > 100);
        for (i, &m) in rb.mask.data.iter().enumerate() {
            if m {
                assert!((rb.depth.data[i] as f64 - z0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let mesh = TriangleMesh::new(
            vec![
                // far triangle (red) at z=3, near triangle (green) at z=2
                Pt3::new(-1.0, -1.0, 3.0),
                Pt3::new(1.0, -1.0, 3.0),
                Pt3::new(0.0, 1.0, 3.0),
                Pt3::new(-1.0, -1.0, 2.0),
                Pt3::new(1.0, -1.0, 2.0),
                Pt3::new(0.0, 1.0, 2.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
            vec![[1.0, 0.0, 0.0]; 3]
                .into_iter()
                .chain(vec![[0.0, 1.0, 0.0]; 3])
                .collect(),
        )
        .unwrap();
        let rb = render(&mesh, &Pose::identity(), &default_k(48));
        for (i, &m) in rb.mask.data.iter().enumerate() {
            if m {
                // Every visible pixel of the overlap region must be green.
                if (rb.depth.data[i] - 2.0).abs() < 1e-4 {
                    assert_eq!(rb.color.data[i][1], 1.0);
                }
                assert!(rb.depth.data[i] <= 3.0 + 1e-4);
            }
        }
        // The near triangle hides the far one entirely (same silhouette, closer).
        assert!(rb.depth.data.iter().all(|&d| d.is_infinite() || (d - 2.0).abs() < 1e-4));
    }

    #[test]
    fn gt_bbox_of_fronto_parallel_square() {
        let z0 = 2.0;
        let half = 0.25;
        let mesh = TriangleMesh::new(
            vec![
                Pt3::new(-half, -half, z0),
                Pt3::new(half, -half, z0),
                Pt3::new(half, half, z0),
                Pt3::new(-half, half, z0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
            vec![[0.5; 3]; 4],
        )
        .unwrap();
        let k = default_k(64);
        let bbox = render_gt_bbox(&mesh, &Pose::identity(), &k).unwrap();
        // Analytic projected rectangle.
        let u0 = k.fx * -half / z0 + k.cx;
        let u1 = k.fx * half / z0 + k.cx;
        // Masked pixels are those whose centers fall inside [u0, u1): the
        // first is ceil(u0 - 0.5), the last is floor(u1 - 0.5) when not on
        // a boundary.
        let first = (u0 - 0.5).ceil();
        let last = (u1 - 0.5).floor();
        assert_eq!(bbox.x0, first);
        assert_eq!(bbox.x1, last + 1.0);
        assert_eq!(bbox.y0, first);
        assert_eq!(bbox.y1, last + 1.0);
    }

    #[test]
    fn gt_bbox_empty_render_errors() {
        let mesh = big_triangle();
        let pose = Pose::from_parts(nalgebra::Matrix3::identity(), Vec3::new(0.0, 0.0, -3.0));
        assert!(matches!(
            render_gt_bbox(&mesh, &pose, &default_k(32)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn extract_cloud_respects_max_points() {
        let mesh = crate::synth::make_procedural_object(4);
        let k = default_k(64);
        let poses = crate::geometry::sample_hemisphere_poses(6, (2.0, 2.5), 9).unwrap();
        let cloud = extract_point_cloud(&mesh, &poses, &k, 100).unwrap();
        assert!(cloud.len() <= 100 && cloud.len() > 20);
        assert!(cloud.colors.is_some());
    }

    #[test]
    fn extract_cloud_empty_errors() {
        let mesh = big_triangle();
        let pose = Pose::from_parts(nalgebra::Matrix3::identity(), Vec3::new(0.0, 0.0, -5.0));
        assert!(matches!(
            extract_point_cloud(&mesh, &[pose], &default_k(32), 100),
            Err(Error::EmptyCloud)
        ));
    }
}
