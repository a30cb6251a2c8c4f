//! Object-frame canonicalization: oriented-box fitting and re-orientation
//! of reference camera poses so the object frame is centered in its
//! bounding box and aligned with the box axes.

use nalgebra::SymmetricEigen;

use super::{compose, Mat3, OrientedBox, PointCloud, Pose, Pt3, Vec3};
use crate::error::{Error, Result};

/// PCA-based oriented bounding box.
///
/// Axes are the principal directions of the centered cloud, ordered by
/// descending half-extent, signs fixed so each axis' largest-magnitude
/// component is positive and the triple is right-handed. Half-extents are
/// the maximum absolute projections, so every input point lies inside.
pub fn fit_oriented_box(cloud: &PointCloud) -> Result<OrientedBox> {
    if cloud.len() < 3 {
        return Err(Error::DegenerateCloud(format!(
            "{} points, need >= 3",
            cloud.len()
        )));
    }
    let center = cloud.centroid();
    let mut cov = Mat3::zeros();
    for p in &cloud.points {
        let d = p - center;
        cov += d * d.transpose();
    }
    cov /= cloud.len() as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if lam[1] <= 1e-12 * lam[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateCloud("points are collinear".into()));
    }

    let mut axes = Mat3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned().normalize(),
        eig.eigenvectors.column(order[1]).into_owned().normalize(),
        eig.eigenvectors.column(order[2]).into_owned().normalize(),
    ]);
    // Repeated eigenvalues leave the principal directions underdetermined
    // (e.g. cube corners have isotropic covariance). Resolve the tie with a
    // deterministic local volume descent; unique spectra keep pure PCA axes.
    let gap = (lam[0] - lam[1]).min(lam[1] - lam[2]) / lam[0].max(f64::MIN_POSITIVE);
    if gap < 1e-6 {
        axes = polish_axes_by_volume(cloud, &center, axes);
    }

    let extents_for = |axes: &Mat3| {
        let mut half = Vec3::zeros();
        for p in &cloud.points {
            let local = axes.transpose() * (p - center);
            half.x = half.x.max(local.x.abs());
            half.y = half.y.max(local.y.abs());
            half.z = half.z.max(local.z.abs());
        }
        half
    };

    // Order axes by descending extent and fix signs deterministically.
    let half = extents_for(&axes);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| half[b].total_cmp(&half[a]));
    let mut cols: Vec<Vec3> = order.iter().map(|&i| axes.column(i).into_owned()).collect();
    for a in cols.iter_mut().take(2) {
        let k = (0..3).max_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs())).unwrap();
        if a[k] < 0.0 {
            *a = -*a;
        }
    }
    cols[2] = cols[0].cross(&cols[1]).normalize();
    let axes = Mat3::from_columns(&[cols[0], cols[1], cols[2]]);
    let half = extents_for(&axes);
    Ok(OrientedBox {
        center,
        axes,
        half_extents: half,
    })
}

/// Coordinate descent over basis rotations minimizing the extent product.
/// Only used to break PCA ties; deterministic.
fn polish_axes_by_volume(cloud: &PointCloud, center: &Pt3, mut axes: Mat3) -> Mat3 {
    let volume = |axes: &Mat3| {
        let mut half = Vec3::zeros();
        for p in &cloud.points {
            let local = axes.transpose() * (p - center);
            half.x = half.x.max(local.x.abs());
            half.y = half.y.max(local.y.abs());
            half.z = half.z.max(local.z.abs());
        }
        half.x * half.y * half.z
    };
    let mut best = volume(&axes);
    let mut step = 0.4f64;
    while step > 1e-8 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let mut w = Vec3::zeros();
                w[axis] = sign * step;
                let cand = axes * super::rotation_exp(&w);
                let v = volume(&cand);
                if v < best - 1e-15 {
                    axes = cand;
                    best = v;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    axes
}

/// Least-squares point closest to all camera optical-axis rays.
///
/// Solves `sum_j (I - d_j d_j') p = sum_j (I - d_j d_j') c_j` where `c_j`
/// is the camera center and `d_j` its viewing direction. Errors when the
/// axes are (near-)parallel and the system is rank-deficient.
pub fn optical_axes_intersection(poses: &[Pose]) -> Result<Pt3> {
    if poses.len() < 2 {
        return Err(Error::invalid("poses", "need >= 2 camera poses"));
    }
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for p in poses {
        let d = p.optical_axis();
        let proj = Mat3::identity() - d * d.transpose();
        a += proj;
        b += proj * p.camera_center().coords;
    }
    let eig = SymmetricEigen::new(a);
    let min_ev = eig.eigenvalues.min();
    if min_ev < 1e-8 * poses.len() as f64 {
        return Err(Error::ParallelAxes);
    }
    let sol = a.lu().solve(&b).ok_or(Error::ParallelAxes)?;
    Ok(Pt3::from(sol))
}

/// Result of [`canonicalize_frame`].
#[derive(Debug, Clone)]
pub struct CanonicalFrame {
    /// Pose of the canonical frame expressed in the original frame:
    /// `x_orig = R * x_canon + t`. Its translation is the canonical origin
    /// in original coordinates.
    pub world_transform: Pose,
    /// Reference poses re-expressed relative to the canonical frame.
    pub poses: Vec<Pose>,
    /// Intermediate origin from step (i), the least-squares intersection
    /// of the camera viewing rays.
    pub ray_origin: Pt3,
}

/// Re-defines the object frame in two steps: (i) locate the point the
/// reference cameras converge on, from their viewing directions; (ii)
/// recenter at the oriented-box center of the object cloud and align the
/// axes with the box. The returned poses map canonical-frame points to
/// each camera; the transformed cloud has its box centered at the origin,
/// axis-aligned.
pub fn canonicalize_frame(cloud: &PointCloud, poses: &[Pose]) -> Result<CanonicalFrame> {
    let ray_origin = optical_axes_intersection(poses)?;
    // Step (i) recenters at the ray origin; step (ii) recenters again at the
    // box center of the (shifted) cloud and rotates to its axes. The two
    // recenterings compose, so the final origin is the box center in
    // original coordinates.
    let obb = fit_oriented_box(cloud)?;
    let world_transform = Pose::from_parts(obb.axes, obb.center.coords);
    let new_poses = poses.iter().map(|p| compose(p, &world_transform)).collect();
    Ok(CanonicalFrame {
        world_transform,
        poses: new_poses,
        ray_origin,
    })
}
