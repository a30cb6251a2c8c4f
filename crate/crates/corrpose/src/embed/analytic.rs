//! Training-free feature oracle.
//!
//! A unit-normalized random-Fourier-feature map of box-normalized surface
//! coordinates. Its companion query map evaluates the same features at a
//! render's ground-truth coordinates, which lets the pose-estimation path
//! be exercised with near-perfect correspondences and no training.

use rand::Rng;

use super::{normalize_points, FeatureMap, KeyModel};
use crate::error::Result;
use crate::geometry::{OrientedBox, Pt3, Vec3};
use crate::img::{CoordMap, MaskImage, ScalarImage};

#[derive(Debug, Clone)]
pub struct AnalyticKeyField {
    pub seed: u64,
    pub norm_box: OrientedBox,
    freqs: Vec<Vec3>,
    phases: Vec<f64>,
}

/// Frequency scale of the Fourier features in normalized box coordinates.
/// Chosen so points a few percent of the object size apart decorrelate.
const FREQ_SIGMA: f64 = 6.0;

impl AnalyticKeyField {
    pub fn new(seed: u64, d: usize, norm_box: OrientedBox) -> Self {
        let mut rng = crate::rng::stream(seed, b"analytic-key");
        let mut freqs = Vec::with_capacity(d);
        let mut phases = Vec::with_capacity(d);
        for _ in 0..d {
            freqs.push(Vec3::new(
                FREQ_SIGMA * normal(&mut rng),
                FREQ_SIGMA * normal(&mut rng),
                FREQ_SIGMA * normal(&mut rng),
            ));
            phases.push(rng.random::<f64>() * std::f64::consts::TAU);
        }
        Self {
            seed,
            norm_box,
            freqs,
            phases,
        }
    }

    fn features_normalized(&self, n: &[f64], out: &mut [f64]) {
        let d = self.freqs.len();
        debug_assert_eq!(out.len(), d);
        let p = Vec3::new(n[0], n[1], n[2]);
        let mut norm2 = 0.0;
        for (i, (f, ph)) in self.freqs.iter().zip(self.phases.iter()).enumerate() {
            let v = (f.dot(&p) + ph).cos();
            out[i] = v;
            norm2 += v * v;
        }
        let inv = 1.0 / norm2.sqrt().max(1e-12);
        for v in out.iter_mut() {
            *v *= inv;
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1 = rng.random::<f64>().max(1e-12);
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl KeyModel for AnalyticKeyField {
    fn dim(&self) -> usize {
        self.freqs.len()
    }

    fn norm_box(&self) -> &OrientedBox {
        &self.norm_box
    }

    fn eval(&self, pts: &[Pt3]) -> Result<Vec<f64>> {
        let normalized = normalize_points(&self.norm_box, pts)?;
        let d = self.dim();
        let mut out = vec![0.0; pts.len() * d];
        for (i, chunk) in normalized.chunks_exact(3).enumerate() {
            self.features_normalized(chunk, &mut out[i * d..(i + 1) * d]);
        }
        Ok(out)
    }
}

/// Builds the oracle embedding for an object whose surface sits inside
/// `norm_box`.
pub fn analytic_embedding(seed: u64, d: usize, norm_box: OrientedBox) -> AnalyticKeyField {
    AnalyticKeyField::new(seed, d, norm_box)
}

/// Companion query oracle: `f_q(p) = f_k(coords(p))` on a ground-truth
/// render, with mask probability 1 on the given mask and 0 elsewhere.
pub fn analytic_query_maps(
    key: &AnalyticKeyField,
    coords: &CoordMap,
    mask: &MaskImage,
) -> Result<(FeatureMap, ScalarImage)> {
    let (w, h) = (coords.width, coords.height);
    let d = key.dim();
    let mut features = FeatureMap::zeros(w, h, d);
    let mut probs = ScalarImage::filled(w, h, 0.0);
    let mut pts = Vec::new();
    let mut idx = Vec::new();
    for i in 0..w * h {
        if mask.data[i] {
            let c = coords.data[i];
            pts.push(Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64));
            idx.push(i);
        }
    }
    let feats = key.eval(&pts)?;
    for (j, &i) in idx.iter().enumerate() {
        features.data[i * d..(i + 1) * d].copy_from_slice(&feats[j * d..(j + 1) * d]);
        probs.data[i] = 1.0;
    }
    Ok((features, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fit_oriented_box;
    use crate::synth::make_procedural_object;

    #[test]
    fn deterministic_per_seed() {
        let mesh = make_procedural_object(1);
        let obb = fit_oriented_box(&mesh.vertex_cloud()).unwrap();
        let a = analytic_embedding(5, 16, obb);
        let b = analytic_embedding(5, 16, obb);
        let pts = &mesh.vertices[0..20];
        assert_eq!(a.eval(pts).unwrap(), b.eval(pts).unwrap());
    }

    #[test]
    fn unit_norm_features() {
        let mesh = make_procedural_object(2);
        let obb = fit_oriented_box(&mesh.vertex_cloud()).unwrap();
        let key = analytic_embedding(9, 24, obb);
        let feats = key.eval(&mesh.vertices).unwrap();
        for row in feats.chunks(24) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    /// Distinct surface points at least 0.05 units apart must not collide
    /// in feature space (cosine similarity stays below 0.95).
    #[test]
    fn separation_on_surface_pairs() {
        use rand::Rng;
        let mesh = make_procedural_object(3);
        let obb = fit_oriented_box(&mesh.vertex_cloud()).unwrap();
        let key = analytic_embedding(11, 24, obb);
        let feats = key.eval(&mesh.vertices).unwrap();
        let d = 24;
        let mut rng = crate::rng::stream(4, b"sep");
        let mut checked = 0;
        let mut worst = 0.0f64;
        while checked < 10_000 {
            let i = (rng.random::<u32>() as usize) % mesh.vertices.len();
            let j = (rng.random::<u32>() as usize) % mesh.vertices.len();
            if (mesh.vertices[i] - mesh.vertices[j]).norm() < 0.05 {
                continue;
            }
            let sim: f64 = (0..d).map(|c| feats[i * d + c] * feats[j * d + c]).sum();
            worst = worst.max(sim);
            assert!(sim < 0.95, "pair ({i},{j}) similarity {sim}");
            checked += 1;
        }
        // Leave headroom so the property is not borderline.
        assert!(worst < 0.93, "worst similarity {worst}");
    }

    /// On a render, the oracle query must match the key of the true
    /// coordinate better than any other surface sample, for nearly all
    /// masked pixels.
    #[test]
    fn query_argmax_hits_true_coordinate() {
        use rand::Rng;
        let mesh = make_procedural_object(4);
        let obb = fit_oriented_box(&mesh.vertex_cloud()).unwrap();
        let key = analytic_embedding(13, 24, obb);
        let pose = crate::geometry::sample_hemisphere_poses(1, (2.0, 2.5), 8).unwrap()[0];
        let k = crate::geometry::Intrinsics::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap();
        let rb = crate::raster::render(&mesh, &pose, &k);
        let (features, _) = analytic_query_maps(&key, &rb.coords, &rb.mask).unwrap();

        // Surface samples: vertices plus the rendered points themselves.
        let mut rng = crate::rng::stream(6, b"argmax");
        let samples: Vec<Pt3> = (0..512)
            .map(|_| mesh.vertices[(rng.random::<u32>() as usize) % mesh.vertices.len()])
            .collect();
        let sample_feats = key.eval(&samples).unwrap();
        let d = 24;

        let mut hits = 0;
        let mut total = 0;
        for y in 0..64 {
            for x in 0..64 {
                if !rb.mask.at(x, y) {
                    continue;
                }
                total += 1;
                let q = features.at(x, y);
                let c = rb.coords.at(x, y);
                let p = Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64);
                // Best surface sample by similarity.
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (i, kf) in sample_feats.chunks(d).enumerate() {
                    let s: f64 = q.iter().zip(kf.iter()).map(|(a, b)| a * b).sum();
                    if s > best {
                        best = s;
                        best_i = i;
                    }
                }
                // The query equals the key at the true point, so the top
                // similarity is 1 at the point itself; any sample that beats
                // 0.999 must be geometrically close.
                if best < 0.999 || (samples[best_i] - p).norm() < 0.05 {
                    hits += 1;
                }
            }
        }
        assert!(total > 500);
        assert!(
            hits as f64 >= 0.99 * total as f64,
            "{hits}/{total} pixels resolve to the true coordinate"
        );
    }
}
