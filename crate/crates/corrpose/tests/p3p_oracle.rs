//! Minimal-solver verification against a brute-force root-finding oracle.
//!
//! The oracle never forms the solver's quartic: it scans the distance
//! ratio `v = s3/s1` over a dense grid, evaluates the residual of the
//! law-of-cosines equation that the closed-form path eliminates, and
//! bisects each sign change. Pose reconstruction from the distances then
//! follows the original trigonometric system only.

use corrpose::geometry::{project, rotation_exp, Intrinsics, PointCloud, Pose, Pt3, Vec3};
use corrpose::pose::solve_p3p;
use corrpose::registration::umeyama;
use rand::Rng;

struct Instance {
    points: [Pt3; 3],
    bearings: [Vec3; 3],
}

fn oracle_solutions(inst: &Instance) -> Vec<Pose> {
    let a = (inst.points[1] - inst.points[2]).norm();
    let b = (inst.points[0] - inst.points[2]).norm();
    let c = (inst.points[0] - inst.points[1]).norm();
    let cos_a = inst.bearings[1].dot(&inst.bearings[2]);
    let cos_b = inst.bearings[0].dot(&inst.bearings[2]);
    let cos_g = inst.bearings[0].dot(&inst.bearings[1]);
    let big_a = (a * a - c * c) / (b * b);

    // u is linear in v from the difference of two law-of-cosines equations;
    // the residual of the remaining equation drives the root search.
    let u_of_v = |v: f64| -> Option<f64> {
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-14 {
            return None;
        }
        Some((big_a * (1.0 - 2.0 * v * cos_b + v * v) + 1.0 - v * v) / denom)
    };
    let residual = |v: f64| -> Option<f64> {
        let u = u_of_v(v)?;
        if u <= 0.0 {
            return None;
        }
        let s1_sq = b * b / (1.0 + v * v - 2.0 * v * cos_b);
        if s1_sq <= 0.0 {
            return None;
        }
        let (s1, s2, s3) = (s1_sq.sqrt(), u * s1_sq.sqrt(), v * s1_sq.sqrt());
        Some(s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_a - a * a)
    };

    // Dense scan + bisection.
    let mut roots = Vec::new();
    let n = 400_000;
    let v_max = 20.0;
    let mut prev: Option<(f64, f64)> = None;
    for i in 1..=n {
        let v = i as f64 / n as f64 * v_max;
        let Some(r) = residual(v) else {
            prev = None;
            continue;
        };
        if let Some((pv, pr)) = prev {
            if pr == 0.0 {
                roots.push(pv);
            } else if pr * r < 0.0 {
                let (mut lo, mut hi) = (pv, v);
                let (mut flo, _) = (pr, r);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    let fm = residual(mid).unwrap();
                    if flo * fm <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        flo = fm;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
        }
        prev = Some((v, r));
    }

    let mut out = Vec::new();
    for v in roots {
        let Some(u) = u_of_v(v) else { continue };
        if u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = (b * b / (1.0 + v * v - 2.0 * v * cos_b)).sqrt();
        let cam = vec![
            Pt3::from(inst.bearings[0] * s1),
            Pt3::from(inst.bearings[1] * (u * s1)),
            Pt3::from(inst.bearings[2] * (v * s1)),
        ];
        let Ok(sim) = umeyama(
            &PointCloud::new(inst.points.to_vec()),
            &PointCloud::new(cam),
            false,
        ) else {
            continue;
        };
        let pose = Pose::new(sim.rotation, sim.translation).expect("umeyama rotation is valid");
        let ok = (0..3).all(|i| {
            let y = pose.transform_point(&inst.points[i]);
            y.z > 0.0 && (y.coords.normalize() - inst.bearings[i]).norm() < 1e-5
        });
        if ok {
            out.push(pose);
        }
    }
    out
}

fn pose_gap(a: &Pose, b: &Pose) -> f64 {
    (a.rotation - b.rotation).norm() + (a.translation - b.translation).norm()
}

#[test]
fn solver_matches_bruteforce_oracle_on_100_instances() {
    let mut rng = corrpose::rng::stream(2024, b"p3p-oracle");
    let k = Intrinsics::new(300.0, 300.0, 128.0, 128.0, 256, 256).unwrap();
    let mut checked = 0;
    while checked < 100 {
        let pose = Pose::new(
            rotation_exp(&Vec3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            )),
            Vec3::new(
                0.4 * (rng.random::<f64>() - 0.5),
                0.4 * (rng.random::<f64>() - 0.5),
                2.0 + 1.5 * rng.random::<f64>(),
            ),
        )
        .unwrap();
        let pts = [
            Pt3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
            Pt3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
            Pt3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
        ];
        if (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).norm() < 0.05 {
            continue;
        }
        let pixels: Vec<_> = pts.iter().map(|p| project(p, &pose, &k).unwrap()).collect();
        let bearings = [
            k.ray(pixels[0].x, pixels[0].y),
            k.ray(pixels[1].x, pixels[1].y),
            k.ray(pixels[2].x, pixels[2].y),
        ];
        let inst = Instance {
            points: pts,
            bearings,
        };

        let solver = solve_p3p(&inst.points, &inst.bearings);
        let oracle = oracle_solutions(&inst);
        assert!(!solver.is_empty(), "instance {checked}: solver returned nothing");
        assert!(!oracle.is_empty(), "instance {checked}: oracle returned nothing");

        // Every oracle pose is found by the solver.
        for o in &oracle {
            let gap = solver.iter().map(|s| pose_gap(s, o)).fold(f64::INFINITY, f64::min);
            assert!(gap < 1e-5, "instance {checked}: oracle pose missed (gap {gap})");
        }
        // The true pose is among the solutions.
        let gap = solver.iter().map(|s| pose_gap(s, &pose)).fold(f64::INFINITY, f64::min);
        assert!(gap < 1e-6, "instance {checked}: true pose missed (gap {gap})");

        // On exact data every returned pose reprojects the three points to
        // within 1e-8 px of the observations.
        for s in &solver {
            for (p, px) in pts.iter().zip(pixels.iter()) {
                let got = project(p, s, &k).expect("solution keeps points in front");
                let err = (got - px).norm();
                assert!(err <= 1e-8, "instance {checked}: reprojection residual {err}");
            }
        }
        checked += 1;
    }
}
