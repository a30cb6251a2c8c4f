//! Rasterizer correctness against per-pixel ray-casting oracles.

use corrpose::geometry::{project, sample_hemisphere_poses, Intrinsics, Pose, Pt3, TriangleMesh, Vec3};
use corrpose::img::MaskImage;
use corrpose::raster::render;
use corrpose::synth::make_procedural_object;
use rand::Rng;

/// Moeller-Trumbore ray/triangle intersection; returns the hit depth along
/// the ray (camera-frame z of the hit point for rays through the pinhole).
fn ray_triangle(origin: &Pt3, dir: &Vec3, a: &Pt3, b: &Pt3, c: &Pt3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let t_vec = origin - a;
    let u = t_vec.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = t_vec.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-9).then_some(t)
}

/// Mask and depth from casting one ray per pixel center against every
/// camera-frame triangle.
fn raycast_oracle(mesh: &TriangleMesh, pose: &Pose, k: &Intrinsics) -> (MaskImage, Vec<f64>) {
    let cam_verts: Vec<Pt3> = mesh.vertices.iter().map(|v| pose.transform_point(v)).collect();
    let mut mask = MaskImage::filled(k.width, k.height, false);
    let mut depth = vec![f64::INFINITY; k.width * k.height];
    let origin = Pt3::origin();
    for y in 0..k.height {
        for x in 0..k.width {
            // Unnormalized ray: z component 1, so t equals camera depth.
            let dir = Vec3::new(
                (x as f64 + 0.5 - k.cx) / k.fx,
                (y as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let mut best = f64::INFINITY;
            for f in &mesh.faces {
                if let Some(t) = ray_triangle(
                    &origin,
                    &dir,
                    &cam_verts[f[0] as usize],
                    &cam_verts[f[1] as usize],
                    &cam_verts[f[2] as usize],
                ) {
                    best = best.min(t);
                }
            }
            if best.is_finite() {
                mask.set(x, y, true);
                depth[y * k.width + x] = best;
            }
        }
    }
    (mask, depth)
}

#[test]
fn reprojection_consistency_on_random_scenes() {
    let mut rng = corrpose::rng::stream(42, b"raster-reproj");
    for case in 0..50 {
        let mesh = make_procedural_object(case % 7);
        let pose = sample_hemisphere_poses(1, (1.6, 3.0), 900 + case).unwrap()[0];
        let res = 48 + (case as usize % 3) * 16;
        let f = res as f64 * (0.9 + 0.6 * rng.random::<f64>());
        let k = Intrinsics::new(f, f, res as f64 / 2.0, res as f64 / 2.0, res, res).unwrap();
        let rb = render(&mesh, &pose, &k);
        assert!(rb.mask.count() > 50, "case {case}: object out of view");
        for y in 0..res {
            for x in 0..res {
                if !rb.mask.at(x, y) {
                    continue;
                }
                let c = rb.coords.at(x, y);
                let p = Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64);
                let px = project(&p, &pose, &k).expect("visible point in front");
                let err = (px.x - (x as f64 + 0.5)).hypot(px.y - (y as f64 + 0.5));
                assert!(err <= 0.5, "case {case}, pixel ({x},{y}): residual {err}");
            }
        }
    }
}

#[test]
fn mask_matches_raycast_on_watertight_mesh() {
    for case in 0..12 {
        let mesh = make_procedural_object(10 + case);
        let pose = sample_hemisphere_poses(1, (1.8, 2.6), 300 + case).unwrap()[0];
        let k = Intrinsics::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        let rb = render(&mesh, &pose, &k);
        let (oracle_mask, _) = raycast_oracle(&mesh, &pose, &k);
        assert_eq!(
            rb.mask.data, oracle_mask.data,
            "case {case}: raster mask differs from ray casting"
        );
    }
}

#[test]
fn depth_buffer_agrees_with_raycast_on_overlapping_triangles() {
    let mut rng = corrpose::rng::stream(7, b"raster-depth");
    for case in 0..20 {
        // Two random triangles in front of the camera, usually overlapping.
        let mut verts = Vec::new();
        for _ in 0..6 {
            verts.push(Pt3::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                1.5 + rng.random::<f64>() * 2.0,
            ));
        }
        let mesh = TriangleMesh::new(verts, vec![[0, 1, 2], [3, 4, 5]], vec![[0.5; 3]; 6]).unwrap();
        let k = Intrinsics::new(12.0, 12.0, 8.0, 8.0, 16, 16).unwrap();
        let rb = render(&mesh, &Pose::identity(), &k);
        let (oracle_mask, oracle_depth) = raycast_oracle(&mesh, &Pose::identity(), &k);
        assert_eq!(rb.mask.data, oracle_mask.data, "case {case}: masks differ");
        for i in 0..rb.depth.data.len() {
            if oracle_mask.data[i] {
                // The nearer triangle must win everywhere, matching the ray.
                let got = rb.depth.data[i] as f64;
                assert!(
                    (got - oracle_depth[i]).abs() < 1e-5,
                    "case {case}, pixel {i}: raster depth {got}, oracle {}",
                    oracle_depth[i]
                );
            }
        }
    }
}

#[test]
fn extracted_cube_points_lie_on_the_surface() {
    // Axis-aligned unit cube centered at the origin.
    let half = 0.5;
    let v = |x: f64, y: f64, z: f64| Pt3::new(x * half, y * half, z * half);
    let vertices = vec![
        v(-1.0, -1.0, -1.0),
        v(1.0, -1.0, -1.0),
        v(1.0, 1.0, -1.0),
        v(-1.0, 1.0, -1.0),
        v(-1.0, -1.0, 1.0),
        v(1.0, -1.0, 1.0),
        v(1.0, 1.0, 1.0),
        v(-1.0, 1.0, 1.0),
    ];
    let faces = vec![
        [0, 1, 2],
        [0, 2, 3],
        [4, 6, 5],
        [4, 7, 6],
        [0, 4, 5],
        [0, 5, 1],
        [3, 2, 6],
        [3, 6, 7],
        [0, 3, 7],
        [0, 7, 4],
        [1, 5, 6],
        [1, 6, 2],
    ];
    let mesh = TriangleMesh::new(vertices, faces, vec![[0.5; 3]; 8]).unwrap();
    let poses = sample_hemisphere_poses(20, (2.2, 3.0), 77).unwrap();
    let k = Intrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap();
    let cloud = corrpose::raster::extract_point_cloud(&mesh, &poses, &k, 2000).unwrap();
    assert!(cloud.len() > 200);
    // Distance to the cube surface: max coordinate must be exactly 0.5.
    for p in &cloud.points {
        let linf = p.x.abs().max(p.y.abs()).max(p.z.abs());
        let dist = (linf - half).abs();
        assert!(
            p.x.abs() <= half + 1e-6 && p.y.abs() <= half + 1e-6 && p.z.abs() <= half + 1e-6,
            "point outside the cube: {p:?}"
        );
        assert!(dist <= 1e-6, "point off the surface by {dist}: {p:?}");
        // Agreement with the generic point-to-mesh oracle.
        let d = corrpose::pipeline::point_to_mesh_distance(p, &mesh);
        assert!(d <= 1e-6, "mesh-distance oracle reports {d}");
    }
}
