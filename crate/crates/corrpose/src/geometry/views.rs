//! Viewpoint generation and crop intrinsics.
//!
//! Training views are sampled from the top hemisphere around the object;
//! each view is rendered through intrinsics adapted to a tight square crop
//! of the projected object, so the object fills the training image.

use rand::Rng;

use super::{rotation_exp, Intrinsics, Mat3, PointCloud, Pose, Vec3};
use crate::error::{Error, Result};

/// Camera poses looking at the origin from the `z >= 0` hemisphere shell.
///
/// Centers are area-uniform on the hemisphere with radius uniform in
/// `[r_min, r_max]`; the roll about the optical axis is uniform in
/// `[0, 2pi)`. Deterministic per seed.
pub fn sample_hemisphere_poses(n: usize, radius: (f64, f64), seed: u64) -> Result<Vec<Pose>> {
    let (r_min, r_max) = radius;
    if n == 0 {
        return Err(Error::invalid("hemisphere", "n must be >= 1"));
    }
    if !(r_min > 0.0 && r_min <= r_max) {
        return Err(Error::invalid("hemisphere", "need 0 < r_min <= r_max"));
    }
    let mut rng = crate::rng::stream(seed, b"hemisphere");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(hemisphere_pose(&mut rng, radius));
    }
    Ok(out)
}

/// One hemisphere viewpoint drawn from an external stream; used by dataset
/// generation so each sample owns an independent, index-keyed stream.
pub fn hemisphere_pose(rng: &mut impl Rng, radius: (f64, f64)) -> Pose {
    let (r_min, r_max) = radius;
    let z: f64 = rng.random::<f64>(); // cos(theta) uniform on [0,1] => area-uniform
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let r = r_min + rng.random::<f64>() * (r_max - r_min);
    let s = (1.0 - z * z).max(0.0).sqrt();
    let center = Vec3::new(r * s * phi.cos(), r * s * phi.sin(), r * z);
    let roll = rng.random::<f64>() * std::f64::consts::TAU;
    look_at_origin(&center, roll)
}

/// Pose of a camera at `center` with its optical axis through the origin,
/// rolled by `roll` radians about that axis.
pub fn look_at_origin(center: &Vec3, roll: f64) -> Pose {
    let fwd = (-center).normalize();
    let mut up_hint = Vec3::z();
    if fwd.cross(&up_hint).norm() < 1e-6 {
        up_hint = Vec3::x();
    }
    let right = up_hint.cross(&fwd).normalize();
    let down = fwd.cross(&right);
    // Rows of R are the camera axes (x right, y down, z forward) in world coords.
    let r = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    let r = rotation_exp(&Vec3::new(0.0, 0.0, roll)) * r;
    let t = -(r * center);
    Pose::from_parts(r, t)
}

/// Square intrinsics of side `out_res` whose frustum covers the projected
/// cloud's 2D bounding box expanded by `margin` (a fraction of the box
/// side). Every visible cloud point reprojects inside `[0, out_res)^2`.
pub fn crop_intrinsics(
    cloud: &PointCloud,
    pose: &Pose,
    k: &Intrinsics,
    out_res: usize,
    margin: f64,
) -> Result<Intrinsics> {
    if out_res == 0 {
        return Err(Error::invalid("crop", "out_res must be >= 1"));
    }
    if margin < 0.0 {
        return Err(Error::invalid("crop", "margin must be >= 0"));
    }
    let projected = cloud
        .points
        .iter()
        .filter_map(|p| super::project(p, pose, k));
    let bbox = super::BBox2::from_points(projected).ok_or(Error::NoVisiblePoints)?;
    crop_from_box(&bbox, k, out_res, margin)
}

/// Intrinsics for a square crop covering `bbox` (plus margin), rescaled to
/// `out_res`. Shared by training-crop generation and detector-box cropping.
pub fn crop_from_box(
    bbox: &super::BBox2,
    k: &Intrinsics,
    out_res: usize,
    margin: f64,
) -> Result<Intrinsics> {
    let mut side = bbox.width().max(bbox.height()) * (1.0 + margin);
    if !(side > 0.0) {
        side = 1.0; // single point / degenerate box: any scale keeps it centered
    }
    side += 1e-9 * side.max(1.0); // strict containment at margin 0
    let c = bbox.center();
    let left = c.x - 0.5 * side;
    let top = c.y - 0.5 * side;
    let s = out_res as f64 / side;
    Intrinsics::new(
        k.fx * s,
        k.fy * s,
        (k.cx - left) * s,
        (k.cy - top) * s,
        out_res,
        out_res,
    )
}

/// Pixel mapping from full-image coordinates to crop coordinates implied by
/// a [`crop_from_box`] result: `p_crop = (p - offset) * scale`.
pub fn crop_pixel_map(k_full: &Intrinsics, k_crop: &Intrinsics) -> (f64, super::Vec2) {
    let scale = k_crop.fx / k_full.fx;
    let offset = super::Vec2::new(
        k_full.cx - k_crop.cx / scale,
        k_full.cy - k_crop.cy / scale,
    );
    (scale, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Pt3};
    use approx::assert_relative_eq;

    #[test]
    fn hemisphere_contract() {
        let poses = sample_hemisphere_poses(1000, (1.5, 2.5), 42).unwrap();
        assert_eq!(poses.len(), 1000);
        for p in &poses {
            let c = p.camera_center();
            assert!(c.z >= 0.0);
            let r = c.coords.norm();
            assert!((1.5..=2.5).contains(&r), "radius {r}");
        }
    }

    #[test]
    fn hemisphere_deterministic() {
        let a = sample_hemisphere_poses(50, (1.0, 2.0), 7).unwrap();
        let b = sample_hemisphere_poses(50, (1.0, 2.0), 7).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.rotation, y.rotation);
            assert_eq!(x.translation, y.translation);
        }
    }

    #[test]
    fn hemisphere_looks_at_origin() {
        for p in sample_hemisphere_poses(200, (1.0, 3.0), 3).unwrap() {
            // Origin maps onto the optical axis: x = y = 0 in camera frame.
            let o = p.transform_point(&Pt3::origin());
            assert!(o.x.abs() < 1e-9 && o.y.abs() < 1e-9);
            assert!(o.z > 0.0);
            // Proper rotation.
            assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_centers_single_point() {
        let k = Intrinsics::new(300.0, 300.0, 320.0, 240.0, 640, 480).unwrap();
        let cloud = PointCloud::new(vec![Pt3::new(0.3, -0.2, 2.0)]);
        let pose = Pose::identity();
        let kc = crop_intrinsics(&cloud, &pose, &k, 128, 0.0).unwrap();
        let px = project(&cloud.points[0], &pose, &kc).unwrap();
        assert_relative_eq!(px.x, 64.0, epsilon = 1e-6);
        assert_relative_eq!(px.y, 64.0, epsilon = 1e-6);
    }

    #[test]
    fn crop_contains_all_visible_points() {
        use rand::Rng;
        let k = Intrinsics::new(280.0, 280.0, 320.0, 240.0, 640, 480).unwrap();
        let mut rng = crate::rng::stream(17, b"crop-contain");
        for case in 0..100 {
            let pts: Vec<Pt3> = (0..60)
                .map(|_| {
                    Pt3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    )
                })
                .collect();
            let cloud = PointCloud::new(pts);
            let poses = sample_hemisphere_poses(1, (2.0, 3.0), 1000 + case).unwrap();
            let kc = crop_intrinsics(&cloud, &poses[0], &k, 224, 0.05).unwrap();
            for p in &cloud.points {
                let px = project(p, &poses[0], &kc).unwrap();
                assert!(
                    px.x >= 0.0 && px.x < 224.0 && px.y >= 0.0 && px.y < 224.0,
                    "case {case}: point projects to {px:?}"
                );
            }
        }
    }

    #[test]
    fn crop_behind_camera_errors() {
        let k = Intrinsics::new(300.0, 300.0, 320.0, 240.0, 640, 480).unwrap();
        let cloud = PointCloud::new(vec![Pt3::new(0.0, 0.0, -2.0), Pt3::new(0.1, 0.0, -1.0)]);
        assert!(matches!(
            crop_intrinsics(&cloud, &Pose::identity(), &k, 128, 0.05),
            Err(Error::NoVisiblePoints)
        ));
    }

    #[test]
    fn crop_pixel_map_roundtrip() {
        let k = Intrinsics::new(300.0, 300.0, 320.0, 240.0, 640, 480).unwrap();
        let b = super::super::BBox2 {
            x0: 100.0,
            y0: 80.0,
            x1: 300.0,
            y1: 260.0,
        };
        let kc = crop_from_box(&b, &k, 224, 0.05).unwrap();
        let (scale, offset) = crop_pixel_map(&k, &kc);
        // A world point projected through both must agree with the pixel map.
        let p = Pt3::new(0.05, -0.1, 1.8);
        let full = project(&p, &Pose::identity(), &k).unwrap();
        let crop = project(&p, &Pose::identity(), &kc).unwrap();
        assert_relative_eq!((full - offset) * scale, crop, epsilon = 1e-9);
    }
}
