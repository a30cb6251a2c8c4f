//! Pose inference from a single image crop.
//!
//! Stages: mask-weighted query/key similarity over uniform surface samples,
//! importance-sampled 2D-3D correspondences, P3P+RANSAC with LM polishing,
//! render-based score maximization, and an optional depth correction.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{query_eval, FeatureMap, KeyModel, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::geometry::{crop_from_box, crop_pixel_map, BBox2, Intrinsics, PointCloud, Pose, Pt3, TriangleMesh, Vec2};
use crate::img::{RgbImage, ScalarImage};

mod lm;
mod p3p;
mod refine;

pub use lm::refine_reprojection;
pub use p3p::{real_roots, solve_p3p};
pub use refine::{refine_pose, refine_with_depth};

/// Which stage produced a [`PoseEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ransac,
    Refined,
    DepthRefined,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseEstimate {
    #[serde(with = "pose_serde")]
    pub pose: Pose,
    /// Inlier fraction at the RANSAC stage, rendered similarity score
    /// afterwards.
    pub score: f64,
    pub inliers: usize,
    pub stage: Stage,
}

mod pose_serde {
    use super::*;
    use crate::io::PoseJson;

    pub fn serialize<S: serde::Serializer>(pose: &Pose, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::Serialize;
        PoseJson::from(pose).serialize(s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Pose, D::Error> {
        use serde::Deserialize;
        let j = PoseJson::deserialize(d)?;
        Pose::try_from(&j).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    /// Rows below this mask probability are excluded from the similarity.
    pub pixel_floor: f64,
    /// Uniform surface samples forming the similarity columns.
    pub n_surface: usize,
    /// Correspondences drawn by importance sampling.
    pub n_correspondences: usize,
    pub ransac_iterations: usize,
    /// Inlier threshold in pixels at a 224-wide crop; scaled linearly with
    /// the crop resolution.
    pub inlier_px: f64,
    /// Hypotheses kept for rendered scoring.
    pub top_hypotheses: usize,
    /// Softmax temperature on similarity logits.
    pub temperature: f64,
    /// Pad fraction when cropping a detector box, matching the training
    /// crop margin.
    pub crop_pad: f64,
    pub refine: refine::RefineConfig,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            pixel_floor: 0.3,
            n_surface: 2048,
            n_correspondences: 1024,
            ransac_iterations: 1000,
            inlier_px: 2.0,
            top_hypotheses: 8,
            temperature: 1.0,
            crop_pad: 0.05,
            refine: refine::RefineConfig::default(),
        }
    }
}

/// Mask-weighted similarity between query features and the key features of
/// a uniform surface-point sample.
pub struct SimilarityContext<'a> {
    pub key: &'a dyn KeyModel,
    pub width: usize,
    pub height: usize,
    pub d: usize,
    /// Pixel (x, y) per row.
    pub row_pixels: Vec<(u32, u32)>,
    /// Mask probability per row.
    pub row_probs: Vec<f64>,
    /// Row index per pixel, -1 where below the floor.
    pub row_of_pixel: Vec<i32>,
    /// Query feature per row, `rows x d`.
    pub row_features: Vec<f64>,
    /// Sampled surface points and their key features (`n_surface x d`).
    pub points: Vec<Pt3>,
    pub key_features: Vec<f64>,
    /// Dot-product similarity, `rows x n_surface`.
    pub sim: Vec<f64>,
    /// Per-row max logit and sum of exp(logit - max), for stable softmax.
    pub row_max: Vec<f64>,
    pub row_sumexp: Vec<f64>,
    pub temperature: f64,
}

impl<'a> SimilarityContext<'a> {
    pub fn rows(&self) -> usize {
        self.row_pixels.len()
    }

    pub fn n_surface(&self) -> usize {
        self.points.len()
    }

    /// Softmax probability that row `r` assigns to an external logit `s`
    /// competing against the row's surface-sample logits.
    pub fn prob_against_row(&self, r: usize, s: f64) -> f64 {
        let s = s / self.temperature;
        let m = self.row_max[r].max(s);
        let num = (s - m).exp();
        num / (num + (self.row_max[r] - m).exp() * self.row_sumexp[r])
    }
}

/// Builds the similarity context: `n_surface` uniform cloud samples scored
/// against every pixel whose mask probability reaches the floor.
pub fn build_similarity<'a>(
    query: &FeatureMap,
    mask_probs: &ScalarImage,
    cloud: &PointCloud,
    key: &'a dyn KeyModel,
    n_surface: usize,
    seed: u64,
    cfg: &PoseConfig,
) -> Result<SimilarityContext<'a>> {
    if cloud.is_empty() {
        return Err(Error::invalid("similarity", "empty cloud"));
    }
    let (w, h) = (query.width, query.height);
    let d = query.d;
    if mask_probs.width != w || mask_probs.height != h {
        return Err(Error::ResolutionMismatch {
            got_w: mask_probs.width,
            got_h: mask_probs.height,
            want_w: w,
            want_h: h,
        });
    }

    let mut rng = crate::rng::stream(seed, b"surface-samples");
    let points: Vec<Pt3> = (0..n_surface)
        .map(|_| cloud.points[(rng.random::<u32>() as usize) % cloud.len()])
        .collect();
    let key_features = key.eval(&points)?;

    let mut row_pixels = Vec::new();
    let mut row_probs = Vec::new();
    let mut row_of_pixel = vec![-1i32; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = mask_probs.at(x, y) as f64;
            if p >= cfg.pixel_floor {
                row_of_pixel[y * w + x] = row_pixels.len() as i32;
                row_pixels.push((x as u32, y as u32));
                row_probs.push(p);
            }
        }
    }
    if row_pixels.is_empty() {
        return Err(Error::NoMaskedPixels);
    }

    let rows = row_pixels.len();
    let mut row_features = vec![0.0; rows * d];
    for (r, &(x, y)) in row_pixels.iter().enumerate() {
        row_features[r * d..(r + 1) * d].copy_from_slice(query.at(x as usize, y as usize));
    }

    let inv_t = 1.0 / cfg.temperature;
    let mut sim = vec![0.0; rows * n_surface];
    let mut row_max = vec![f64::NEG_INFINITY; rows];
    let mut row_sumexp = vec![0.0; rows];
    for r in 0..rows {
        let q = &row_features[r * d..(r + 1) * d];
        let out = &mut sim[r * n_surface..(r + 1) * n_surface];
        let mut m = f64::NEG_INFINITY;
        for (j, o) in out.iter_mut().enumerate() {
            let kf = &key_features[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for c in 0..d {
                acc += q[c] * kf[c];
            }
            *o = acc;
            m = m.max(acc * inv_t);
        }
        let mut se = 0.0;
        for o in out.iter() {
            se += (o * inv_t - m).exp();
        }
        row_max[r] = m;
        row_sumexp[r] = se;
    }

    Ok(SimilarityContext {
        key,
        width: w,
        height: h,
        d,
        row_pixels,
        row_probs,
        row_of_pixel,
        row_features,
        points,
        key_features,
        sim,
        row_max,
        row_sumexp,
        temperature: cfg.temperature,
    })
}

#[derive(Debug, Clone)]
pub struct Correspondence {
    /// Pixel center in crop coordinates.
    pub pixel: Vec2,
    pub point: Pt3,
    pub weight: f64,
}

pub type CorrespondenceSet = Vec<Correspondence>;

/// Importance sampling: pixel rows proportional to mask probability, then
/// a surface point proportional to the row's similarity softmax. Weight is
/// the product of the two probabilities.
pub fn sample_correspondences(ctx: &SimilarityContext, n: usize, seed: u64) -> CorrespondenceSet {
    if n == 0 || ctx.rows() == 0 {
        return Vec::new();
    }
    let mut rng = crate::rng::stream(seed, b"correspondences");

    // Pixel CDF over rows.
    let total: f64 = ctx.row_probs.iter().sum();
    let mut pixel_cdf = Vec::with_capacity(ctx.rows());
    let mut acc = 0.0;
    for &p in &ctx.row_probs {
        acc += p;
        pixel_cdf.push(acc);
    }

    let n_surface = ctx.n_surface();
    let inv_t = 1.0 / ctx.temperature;
    let mut row_cdfs: HashMap<usize, Vec<f64>> = HashMap::new();

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let r = pixel_cdf.partition_point(|&c| c < u).min(ctx.rows() - 1);
        let p_pixel = ctx.row_probs[r] / total;

        let cdf = row_cdfs.entry(r).or_insert_with(|| {
            let logits = &ctx.sim[r * n_surface..(r + 1) * n_surface];
            let m = ctx.row_max[r];
            let mut acc = 0.0;
            logits
                .iter()
                .map(|&l| {
                    acc += (l * inv_t - m).exp();
                    acc
                })
                .collect()
        });
        let z = *cdf.last().unwrap();
        let v = rng.random::<f64>() * z;
        let j = cdf.partition_point(|&c| c < v).min(n_surface - 1);
        let p_point = ((ctx.sim[r * n_surface + j] * inv_t - ctx.row_max[r]).exp()) / z;

        let (x, y) = ctx.row_pixels[r];
        out.push(Correspondence {
            pixel: Vec2::new(x as f64 + 0.5, y as f64 + 0.5),
            point: ctx.points[j],
            weight: p_pixel * p_point,
        });
    }
    out
}

/// P3P+RANSAC over the correspondence set, LM-refining the best hypotheses
/// over their inliers. Returns up to `cfg.top_hypotheses` estimates sorted
/// by inlier count.
pub fn pnp_ransac(
    corr: &CorrespondenceSet,
    k: &Intrinsics,
    iterations: usize,
    inlier_px: f64,
    seed: u64,
    top_k: usize,
) -> Result<Vec<PoseEstimate>> {
    if corr.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: corr.len(),
        });
    }
    let bearings: Vec<crate::geometry::Vec3> = corr.iter().map(|c| k.ray(c.pixel.x, c.pixel.y)).collect();

    let count_inliers = |pose: &Pose| -> usize {
        corr.iter()
            .filter(|c| {
                crate::geometry::project(&c.point, pose, k)
                    .map(|px| (px - c.pixel).norm() <= inlier_px)
                    .unwrap_or(false)
            })
            .count()
    };

    // Keep the best hypotheses seen across all iterations.
    let mut best: Vec<(usize, Pose)> = Vec::new();
    for iter in 0..iterations {
        let mut rng = crate::rng::indexed_stream(seed, b"ransac-iter", iter as u64);
        let mut idx = [0usize; 3];
        let mut guard = 0;
        loop {
            for slot in idx.iter_mut() {
                *slot = (rng.random::<u32>() as usize) % corr.len();
            }
            if idx[0] != idx[1] && idx[0] != idx[2] && idx[1] != idx[2] {
                break;
            }
            guard += 1;
            if guard > 64 {
                break;
            }
        }
        if idx[0] == idx[1] || idx[0] == idx[2] || idx[1] == idx[2] {
            continue;
        }
        let pts = [corr[idx[0]].point, corr[idx[1]].point, corr[idx[2]].point];
        let brs = [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]];
        for pose in solve_p3p(&pts, &brs) {
            let inliers = count_inliers(&pose);
            if inliers < 3 {
                continue;
            }
            if best.len() < top_k {
                best.push((inliers, pose));
                best.sort_by(|a, b| b.0.cmp(&a.0));
            } else if inliers > best.last().unwrap().0 {
                *best.last_mut().unwrap() = (inliers, pose);
                best.sort_by(|a, b| b.0.cmp(&a.0));
            }
        }
    }
    if best.is_empty() {
        return Err(Error::NoHypothesis);
    }

    // LM over inliers, then recount.
    let mut out = Vec::with_capacity(best.len());
    for (_, pose) in best {
        let inlier_idx: Vec<usize> = (0..corr.len())
            .filter(|&i| {
                crate::geometry::project(&corr[i].point, &pose, k)
                    .map(|px| (px - corr[i].pixel).norm() <= inlier_px)
                    .unwrap_or(false)
            })
            .collect();
        let pts: Vec<Pt3> = inlier_idx.iter().map(|&i| corr[i].point).collect();
        let pxs: Vec<Vec2> = inlier_idx.iter().map(|&i| corr[i].pixel).collect();
        let (refined, _) = refine_reprojection(&pose, &pts, &pxs, k, 30);
        let inliers = count_inliers(&refined);
        out.push(PoseEstimate {
            pose: refined,
            score: inliers as f64 / corr.len() as f64,
            inliers,
            stage: Stage::Ransac,
        });
    }
    out.sort_by(|a, b| b.inliers.cmp(&a.inliers).then(b.score.total_cmp(&a.score)));
    out.dedup_by(|a, b| {
        (a.pose.rotation - b.pose.rotation).norm() < 1e-9
            && (a.pose.translation - b.pose.translation).norm() < 1e-9
    });
    Ok(out)
}

/// Renders the mesh at `pose` and scores how strongly each visible pixel's
/// query feature matches the key feature of the rendered coordinate,
/// relative to the surface-sample set. Mean softmax probability over
/// pixels shared by the render and the similarity rows; 0 without overlap.
pub fn score_pose(
    pose: &Pose,
    ctx: &SimilarityContext,
    mesh: &TriangleMesh,
    k: &Intrinsics,
) -> Result<f64> {
    let rb = crate::raster::render(mesh, pose, k);
    let mut pts = Vec::new();
    let mut rows = Vec::new();
    for i in 0..rb.mask.data.len() {
        if !rb.mask.data[i] {
            continue;
        }
        let r = ctx.row_of_pixel[i];
        if r < 0 {
            continue;
        }
        let c = rb.coords.data[i];
        pts.push(Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64));
        rows.push(r as usize);
    }
    if pts.is_empty() {
        return Ok(0.0);
    }
    let feats = ctx.key.eval(&pts)?;
    let d = ctx.d;
    let mut acc = 0.0;
    for (i, &r) in rows.iter().enumerate() {
        let q = &ctx.row_features[r * d..(r + 1) * d];
        let kf = &feats[i * d..(i + 1) * d];
        let mut s = 0.0;
        for c in 0..d {
            s += q[c] * kf[c];
        }
        acc += ctx.prob_against_row(r, s);
    }
    Ok(acc / rows.len() as f64)
}

/// Inputs shared by the full estimation pipeline.
pub struct EstimateInputs<'a> {
    pub mesh: &'a TriangleMesh,
    pub cloud: &'a PointCloud,
    pub key: &'a dyn KeyModel,
}

/// Runs similarity, correspondence sampling, RANSAC, rendered scoring and
/// refinement on prebuilt query maps (crop frame). The entry point for
/// both the trained and the analytic paths.
pub fn estimate_from_maps(
    query: &FeatureMap,
    mask_probs: &ScalarImage,
    k_crop: &Intrinsics,
    inputs: &EstimateInputs,
    depth: Option<&ScalarImage>,
    cfg: &PoseConfig,
    seed: u64,
) -> Result<PoseEstimate> {
    let ctx = build_similarity(
        query,
        mask_probs,
        inputs.cloud,
        inputs.key,
        cfg.n_surface,
        seed,
        cfg,
    )?;
    let corr = sample_correspondences(&ctx, cfg.n_correspondences, seed ^ 0x9e37);
    let inlier_px = cfg.inlier_px * k_crop.width as f64 / 224.0;
    let hyps = pnp_ransac(
        &corr,
        k_crop,
        cfg.ransac_iterations,
        inlier_px,
        seed ^ 0x79b9,
        cfg.top_hypotheses,
    )?;

    let mut best: Option<PoseEstimate> = None;
    for h in &hyps {
        let s = score_pose(&h.pose, &ctx, inputs.mesh, k_crop)?;
        if best.as_ref().map(|b| s > b.score).unwrap_or(true) {
            best = Some(PoseEstimate {
                pose: h.pose,
                score: s,
                inliers: h.inliers,
                stage: Stage::Ransac,
            });
        }
    }
    let best = best.ok_or(Error::NoHypothesis)?;

    let refined = refine_pose(&best, &ctx, inputs.mesh, k_crop, &cfg.refine)?;
    if let Some(depth) = depth {
        let corrected = refine_with_depth(&refined.pose, depth, inputs.mesh, k_crop)?;
        return Ok(PoseEstimate {
            pose: corrected.pose,
            score: refined.score,
            inliers: refined.inliers.max(best.inliers),
            stage: Stage::DepthRefined,
        });
    }
    Ok(PoseEstimate {
        inliers: best.inliers,
        ..refined
    })
}

/// Full path from a detector box: crop and rescale the image to the model
/// resolution with adapted intrinsics, run the query network, estimate.
pub fn estimate(
    image: &RgbImage,
    bbox: &BBox2,
    model: &ModelCheckpoint,
    mesh: &TriangleMesh,
    cloud: &PointCloud,
    k: &Intrinsics,
    depth: Option<&ScalarImage>,
    cfg: &PoseConfig,
    seed: u64,
) -> Result<PoseEstimate> {
    let frame = BBox2 {
        x0: 0.0,
        y0: 0.0,
        x1: image.width as f64,
        y1: image.height as f64,
    };
    if !bbox.intersects(&frame) {
        return Err(Error::BoxOutsideImage);
    }
    let ModelCheckpoint::Trained { key, query } = model else {
        return Err(Error::Config(
            "image-based estimation requires a trained checkpoint; the analytic oracle \
             needs ground-truth renders (see estimate_from_maps)"
                .into(),
        ));
    };
    let res = query.resolution;
    let k_crop = crop_from_box(bbox, k, res, cfg.crop_pad)?;
    let (scale, offset) = crop_pixel_map(k, &k_crop);

    let mut crop = RgbImage::filled(res, res, [0.0; 3]);
    for y in 0..res {
        for x in 0..res {
            let src_x = (x as f64 + 0.5) / scale + offset.x;
            let src_y = (y as f64 + 0.5) / scale + offset.y;
            crop.set(x, y, image.sample_bilinear(src_x, src_y));
        }
    }
    let depth_crop = depth.map(|d| {
        let mut out = ScalarImage::filled(res, res, 0.0);
        for y in 0..res {
            for x in 0..res {
                let sx = ((x as f64 + 0.5) / scale + offset.x) as usize;
                let sy = ((y as f64 + 0.5) / scale + offset.y) as usize;
                if sx < d.width && sy < d.height {
                    out.set(x, y, d.at(sx, sy));
                }
            }
        }
        out
    });

    let (features, probs) = query_eval(query, &crop)?;
    let inputs = EstimateInputs {
        mesh,
        cloud,
        key,
    };
    estimate_from_maps(
        &features,
        &probs,
        &k_crop,
        &inputs,
        depth_crop.as_ref(),
        cfg,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{analytic_embedding, analytic_query_maps};
    use crate::geometry::fit_oriented_box;
    use crate::synth::make_procedural_object;

    fn setup() -> (TriangleMesh, PointCloud, crate::embed::AnalyticKeyField, Intrinsics) {
        let mesh = make_procedural_object(1);
        let cloud = mesh.vertex_cloud();
        let obb = fit_oriented_box(&cloud).unwrap();
        let key = analytic_embedding(3, 24, obb);
        let k = Intrinsics::new(90.0, 90.0, 32.0, 32.0, 64, 64).unwrap();
        (mesh, cloud, key, k)
    }

    #[test]
    fn similarity_rows_match_mask() {
        let (mesh, cloud, key, k) = setup();
        let pose = crate::geometry::sample_hemisphere_poses(1, (2.2, 2.5), 4).unwrap()[0];
        let rb = crate::raster::render(&mesh, &pose, &k);
        let (features, probs) = analytic_query_maps(&key, &rb.coords, &rb.mask).unwrap();
        let cfg = PoseConfig::default();
        let ctx = build_similarity(&features, &probs, &cloud, &key, 256, 1, &cfg).unwrap();
        assert_eq!(ctx.rows(), rb.mask.count());
        assert_eq!(ctx.sim.len(), ctx.rows() * 256);
        assert!(ctx.sim.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn similarity_empty_mask_errors() {
        let (_, cloud, key, _) = setup();
        let features = FeatureMap::zeros(16, 16, 24);
        let probs = ScalarImage::filled(16, 16, 0.0);
        let cfg = PoseConfig::default();
        assert!(matches!(
            build_similarity(&features, &probs, &cloud, &key, 64, 1, &cfg),
            Err(Error::NoMaskedPixels)
        ));
    }

    #[test]
    fn similarity_argmax_finds_true_coordinate() {
        let (mesh, cloud, key, k) = setup();
        let pose = crate::geometry::sample_hemisphere_poses(1, (2.2, 2.5), 9).unwrap()[0];
        let rb = crate::raster::render(&mesh, &pose, &k);
        let (features, probs) = analytic_query_maps(&key, &rb.coords, &rb.mask).unwrap();
        let cfg = PoseConfig::default();
        let ctx = build_similarity(&features, &probs, &cloud, &key, 2048, 2, &cfg).unwrap();
        let n = ctx.n_surface();
        let mut hits = 0;
        for r in 0..ctx.rows() {
            let (x, y) = ctx.row_pixels[r];
            let c = rb.coords.at(x as usize, y as usize);
            let truth = Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64);
            let row = &ctx.sim[r * n..(r + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if (ctx.points[best] - truth).norm() < 0.05 {
                hits += 1;
            }
        }
        assert!(
            hits as f64 >= 0.95 * ctx.rows() as f64,
            "{hits}/{} rows matched",
            ctx.rows()
        );
    }

    #[test]
    fn correspondences_empty_when_n_zero() {
        let (mesh, cloud, key, k) = setup();
        let pose = crate::geometry::sample_hemisphere_poses(1, (2.2, 2.5), 4).unwrap()[0];
        let rb = crate::raster::render(&mesh, &pose, &k);
        let (features, probs) = analytic_query_maps(&key, &rb.coords, &rb.mask).unwrap();
        let cfg = PoseConfig::default();
        let ctx = build_similarity(&features, &probs, &cloud, &key, 128, 1, &cfg).unwrap();
        assert!(sample_correspondences(&ctx, 0, 1).is_empty());
    }

    #[test]
    fn ransac_too_few_correspondences() {
        let k = Intrinsics::new(90.0, 90.0, 32.0, 32.0, 64, 64).unwrap();
        let corr: CorrespondenceSet = (0..3)
            .map(|i| Correspondence {
                pixel: Vec2::new(10.0 + i as f64, 20.0),
                point: Pt3::new(i as f64, 0.0, 0.0),
                weight: 1.0,
            })
            .collect();
        assert!(matches!(
            pnp_ransac(&corr, &k, 10, 2.0, 1, 4),
            Err(Error::TooFewCorrespondences { .. })
        ));
    }
}
