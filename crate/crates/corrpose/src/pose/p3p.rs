//! Minimal perspective-three-point solver.
//!
//! Classic distance-ratio formulation: with camera-to-point distances
//! `s1, s2, s3` and `u = s2/s1`, `v = s3/s1`, the law-of-cosines system
//! reduces to a quartic in `v` (u is linear in v). Each admissible root
//! yields camera-frame points; the rigid transform then comes from
//! three-point alignment. Up to four real solutions.

use nalgebra::Matrix4;

use crate::geometry::{PointCloud, Pose, Pt3, Vec3};
use crate::registration::umeyama;

/// Solves for poses with `x_cam = R x + t` from three object points and
/// three unit bearing vectors. Returns an empty vector for degenerate
/// input (collinear points, coincident bearings).
pub fn solve_p3p(points: &[Pt3; 3], bearings: &[Vec3; 3]) -> Vec<Pose> {
    let a = (points[1] - points[2]).norm();
    let b = (points[0] - points[2]).norm();
    let c = (points[0] - points[1]).norm();
    if a < 1e-12 || b < 1e-12 || c < 1e-12 {
        return Vec::new();
    }
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);
    if cos_a.abs() > 1.0 - 1e-12 || cos_b.abs() > 1.0 - 1e-12 || cos_g.abs() > 1.0 - 1e-12 {
        return Vec::new();
    }

    let b2 = b * b;
    let big_a = (a * a - c * c) / b2;
    let k2 = (c * c) / b2;

    // u = N(v) / D(v)
    let n_poly = [big_a + 1.0, -2.0 * big_a * cos_b, big_a - 1.0];
    let d_poly = [2.0 * cos_g, -2.0 * cos_a];
    // P(v) = 1 - K2 (1 + v^2 - 2 v cos_b)
    let p_poly = [1.0 - k2, 2.0 * k2 * cos_b, -k2];

    // Quartic: D^2 P + N^2 - 2 cos_g N D = 0.
    let dd = poly_mul(&d_poly, &d_poly);
    let mut quartic = poly_mul(&dd, &p_poly);
    let nn = poly_mul(&n_poly, &n_poly);
    poly_add(&mut quartic, &nn, 1.0);
    let nd = poly_mul(&n_poly, &d_poly);
    poly_add(&mut quartic, &nd, -2.0 * cos_g);

    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        if !(v > 1e-9) {
            continue;
        }
        let denom = d_poly[0] + d_poly[1] * v;
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = (n_poly[0] + n_poly[1] * v + n_poly[2] * v * v) / denom;
        if !(u > 1e-9) {
            continue;
        }
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let (s2, s3) = (u * s1, v * s1);
        let cam = [
            Pt3::from(bearings[0] * s1),
            Pt3::from(bearings[1] * s2),
            Pt3::from(bearings[2] * s3),
        ];
        let Ok(sim) = umeyama(
            &PointCloud::new(points.to_vec()),
            &PointCloud::new(cam.to_vec()),
            false,
        ) else {
            continue;
        };
        let pose = Pose::from_parts(sim.rotation, sim.translation);
        // Reject spurious roots that do not reproduce the bearings.
        let consistent = (0..3).all(|i| {
            let y = pose.transform_point(&points[i]);
            y.z > 0.0 && (y.coords.normalize() - bearings[i]).norm() < 1e-4
        });
        if !consistent {
            continue;
        }
        // Quartic coefficient rounding leaves ~1e-11 in the root; polish
        // the pose on the exact three-point system (6 residuals, 6 DoF).
        let pose = polish_on_bearings(&pose, points, bearings);
        // Dedupe near-identical solutions from clustered roots.
        if out.iter().any(|p: &Pose| {
            (p.rotation - pose.rotation).norm() < 1e-6 && (p.translation - pose.translation).norm() < 1e-6
        }) {
            continue;
        }
        out.push(pose);
    }
    out
}

/// Gauss-Newton refinement against the bearing observations through a
/// unit virtual camera (`px = X/Z, py = Y/Z`).
fn polish_on_bearings(pose: &Pose, points: &[Pt3; 3], bearings: &[Vec3; 3]) -> Pose {
    let k = crate::geometry::Intrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).expect("unit camera");
    let pixels: Vec<crate::geometry::Vec2> = bearings
        .iter()
        .map(|b| crate::geometry::Vec2::new(b.x / b.z, b.y / b.z))
        .collect();
    let (refined, _) = super::lm::refine_reprojection(pose, points.as_slice(), &pixels, &k, 10);
    refined
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(acc: &mut Vec<f64>, other: &[f64], scale: f64) {
    if acc.len() < other.len() {
        acc.resize(other.len(), 0.0);
    }
    for (i, &y) in other.iter().enumerate() {
        acc[i] += scale * y;
    }
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn poly_derive(p: &[f64]) -> Vec<f64> {
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| i as f64 * c)
        .collect()
}

/// Real roots of a polynomial (low-to-high coefficients) via the companion
/// matrix, Newton-polished on the original polynomial.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    // Trim (near-)zero leading coefficients relative to the largest.
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-12 * scale {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    if deg == 1 {
        return vec![-c[0] / c[1]];
    }

    let lead = c[deg];
    let monic: Vec<f64> = c.iter().map(|x| x / lead).collect();

    let mut roots = match deg {
        2 => {
            let (b, a) = (monic[1], monic[0]);
            let disc = b * b / 4.0 - a;
            if disc < 0.0 {
                return Vec::new();
            }
            let r = disc.sqrt();
            vec![-b / 2.0 - r, -b / 2.0 + r]
        }
        _ => {
            // Companion matrix eigenvalues (degree 3 or 4 here).
            let mut m = Matrix4::<f64>::zeros();
            for i in 0..deg {
                m[(i, deg - 1)] = -monic[i];
            }
            for i in 1..deg {
                m[(i, i - 1)] = 1.0;
            }
            let m = m.view((0, 0), (deg, deg)).into_owned();
            let eig = m.complex_eigenvalues();
            eig.iter()
                .filter(|z| z.im.abs() < 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };

    // Newton polish against the original polynomial.
    let dp = poly_derive(&c);
    for r in roots.iter_mut() {
        for _ in 0..6 {
            let f = poly_eval(&c, *r);
            let g = poly_eval(&dp, *r);
            if g.abs() < 1e-300 {
                break;
            }
            let step = f / g;
            *r -= step;
            if step.abs() < 1e-15 * (1.0 + r.abs()) {
                break;
            }
        }
    }
    roots.sort_by(|x, y| x.total_cmp(y));
    roots.dedup_by(|x, y| (*x - *y).abs() < 1e-10 * (1.0 + y.abs()));
    roots
}
