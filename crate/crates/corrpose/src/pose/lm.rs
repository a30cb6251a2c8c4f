//! Levenberg-Marquardt minimization of reprojection error over SE(3).

use nalgebra::{Matrix2x3, Matrix3, SMatrix, SVector};

use crate::geometry::{rotation_exp, Intrinsics, Pose, Pt3, Vec2, Vec3};

/// Refines `pose` so the points reproject onto the pixels, minimizing the
/// summed squared pixel residual. The update is a left perturbation
/// `x' = exp(w) (R x + t) + dt`. Returns the pose and the RMS residual in
/// pixels.
pub fn refine_reprojection(
    pose: &Pose,
    points: &[Pt3],
    pixels: &[Vec2],
    k: &Intrinsics,
    max_iters: usize,
) -> (Pose, f64) {
    assert_eq!(points.len(), pixels.len());
    let n = points.len();
    if n == 0 {
        return (*pose, 0.0);
    }
    let mut current = *pose;
    let mut lambda = 1e-3;
    let mut residual = sum_sq(&current, points, pixels, k);

    for _ in 0..max_iters {
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SVector::<f64, 6>::zeros();
        for (p, px) in points.iter().zip(pixels.iter()) {
            let y = current.transform_point(p).coords;
            if y.z <= 1e-9 {
                continue;
            }
            let r = Vec2::new(
                k.fx * y.x / y.z + k.cx - px.x,
                k.fy * y.y / y.z + k.cy - px.y,
            );
            let dview = Matrix2x3::new(
                k.fx / y.z,
                0.0,
                -k.fx * y.x / (y.z * y.z),
                0.0,
                k.fy / y.z,
                -k.fy * y.y / (y.z * y.z),
            );
            // d(exp(w) y + dt)/d(w, dt) at 0 = [-[y]x | I]
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            let skew = Matrix3::new(0.0, -y.z, y.y, y.z, 0.0, -y.x, -y.y, y.x, 0.0);
            let jw = dview * (-skew);
            j.view_mut((0, 0), (2, 3)).copy_from(&jw);
            j.view_mut((0, 3), (2, 3)).copy_from(&dview);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }

        let mut improved = false;
        for _ in 0..8 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(delta) = damped.lu().solve(&(-g)) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vec3::new(delta[0], delta[1], delta[2]);
            let dt = Vec3::new(delta[3], delta[4], delta[5]);
            let rot = rotation_exp(&w);
            let cand = Pose::from_parts(rot * current.rotation, rot * current.translation + dt);
            let cand_res = sum_sq(&cand, points, pixels, k);
            if cand_res < residual {
                current = cand;
                residual = cand_res;
                lambda = (lambda * 0.3).max(1e-12);
                improved = delta.norm() > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (current.orthonormalized(), (residual / n as f64).sqrt())
}

fn sum_sq(pose: &Pose, points: &[Pt3], pixels: &[Vec2], k: &Intrinsics) -> f64 {
    let mut acc = 0.0;
    for (p, px) in points.iter().zip(pixels.iter()) {
        let y = pose.transform_point(p).coords;
        if y.z <= 1e-9 {
            acc += 1e6; // behind-camera points dominate the residual
            continue;
        }
        let dx = k.fx * y.x / y.z + k.cx - px.x;
        let dy = k.fy * y.y / y.z + k.cy - px.y;
        acc += dx * dx + dy * dy;
    }
    acc
}
