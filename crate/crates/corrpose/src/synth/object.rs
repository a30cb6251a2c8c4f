//! Procedural test objects: deformed icospheres with a smooth, spatially
//! varying vertex color function, normalized to unit diameter.

use std::collections::HashMap;

use rand::Rng;

use crate::geometry::{Pt3, TriangleMesh, Vec3};

/// Closed genus-0 mesh (642 vertices, 1280 faces) with deterministic
/// per-seed shape and coloring. The color field is built from a few
/// sinusoidal harmonics of position so that views are texture-discriminable.
pub fn make_procedural_object(seed: u64) -> TriangleMesh {
    let mut rng = crate::rng::stream(seed, b"procedural-object");

    let (mut vertices, faces) = icosphere(3);

    // Radial displacement by a low-frequency sum of sinusoids.
    let mut bumps = Vec::new();
    for _ in 0..4 {
        let dir = random_unit(&mut rng);
        let freq = 2.0 + 3.0 * rng.random::<f64>();
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let amp = 0.04 + 0.07 * rng.random::<f64>();
        bumps.push((dir, freq, phase, amp));
    }
    for v in vertices.iter_mut() {
        let n = v.coords.normalize();
        let mut r = 1.0;
        for (dir, freq, phase, amp) in &bumps {
            r += amp * (freq * n.dot(dir) + phase).sin();
        }
        *v = Pt3::from(n * r);
    }

    // Normalize to unit diameter.
    let mut diam: f64 = 0.0;
    for i in 0..vertices.len() {
        for j in (i + 1)..vertices.len() {
            diam = diam.max((vertices[i] - vertices[j]).norm());
        }
    }
    let s = 1.0 / diam;
    for v in vertices.iter_mut() {
        *v = Pt3::from(v.coords * s);
    }

    // Two harmonics per channel, clamped away from pure black/white.
    let mut colors = Vec::with_capacity(vertices.len());
    let mut fields = Vec::new();
    for _ in 0..3 {
        let k1 = random_unit(&mut rng) * (4.0 + 4.0 * rng.random::<f64>());
        let p1 = rng.random::<f64>() * std::f64::consts::TAU;
        let k2 = random_unit(&mut rng) * (9.0 + 6.0 * rng.random::<f64>());
        let p2 = rng.random::<f64>() * std::f64::consts::TAU;
        fields.push((k1, p1, k2, p2));
    }
    for v in &vertices {
        let mut c = [0.0f32; 3];
        for (ch, (k1, p1, k2, p2)) in fields.iter().enumerate() {
            let val = 0.5 + 0.32 * (k1.dot(&v.coords) + p1).sin() + 0.16 * (k2.dot(&v.coords) + p2).sin();
            c[ch] = (val as f32).clamp(0.04, 0.96);
        }
        colors.push(c);
    }

    TriangleMesh::new(vertices, faces, colors).expect("icosphere construction is valid")
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Unit icosphere: icosahedron subdivided `levels` times.
fn icosphere(levels: usize) -> (Vec<Pt3>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Pt3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Pt3::from(Vec3::new(x, y, z).normalize()))
    .collect();

    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..levels {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    let m = (vertices[a as usize].coords + vertices[b as usize].coords) / 2.0;
                    vertices.push(Pt3::from(m.normalize()));
                    (vertices.len() - 1) as u32
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    (vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_per_seed() {
        let a = make_procedural_object(11);
        let b = make_procedural_object(11);
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.faces, b.faces);
        assert_eq!(a.colors, b.colors);
        let c = make_procedural_object(12);
        assert_ne!(a.vertices, c.vertices);
    }

    #[test]
    fn unit_diameter() {
        let m = make_procedural_object(3);
        let d = m.diameter();
        assert!((d - 1.0).abs() < 1e-6, "diameter {d}");
    }

    #[test]
    fn euler_characteristic_is_two() {
        let m = make_procedural_object(7);
        let v = m.vertices.len() as i64;
        let f = m.faces.len() as i64;
        let mut edges = HashSet::new();
        for face in &m.faces {
            for e in 0..3 {
                let (a, b) = (face[e], face[(e + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(v - edges.len() as i64 + f, 2);
    }

    #[test]
    fn colors_in_unit_range() {
        let m = make_procedural_object(5);
        for c in &m.colors {
            for ch in c {
                assert!((0.0..=1.0).contains(ch));
            }
        }
    }
}
