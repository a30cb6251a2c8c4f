//! Pose refinement: derivative-free ascent of the rendered similarity
//! score, and a one-dimensional depth correction along the viewing ray.

use serde::{Deserialize, Serialize};

use super::{score_pose, PoseEstimate, SimilarityContext, Stage};
use crate::error::{Error, Result};
use crate::geometry::{rotation_exp, Intrinsics, Pose, TriangleMesh, Vec3};
use crate::img::ScalarImage;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Initial rotation step, degrees.
    pub rot_step_deg: f64,
    /// Initial translation step, model units.
    pub trans_step: f64,
    /// Steps shrink by this factor when a sweep yields no improvement.
    pub shrink: f64,
    /// Stop once the rotation step falls below this, degrees.
    pub min_rot_step_deg: f64,
    pub max_evals: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            rot_step_deg: 2.0,
            trans_step: 0.02,
            shrink: 0.5,
            min_rot_step_deg: 0.05,
            max_evals: 300,
        }
    }
}

/// Coordinate ascent over SE(3): rotations about the object center (its
/// frame origin), translations along the camera axes, shrinking steps.
/// The returned score never falls below the starting score.
pub fn refine_pose(
    start: &PoseEstimate,
    ctx: &SimilarityContext,
    mesh: &TriangleMesh,
    k: &Intrinsics,
    cfg: &RefineConfig,
) -> Result<PoseEstimate> {
    let mut pose = start.pose;
    let mut score = score_pose(&pose, ctx, mesh, k)?;
    let mut rot_step = cfg.rot_step_deg.to_radians();
    let mut trans_step = cfg.trans_step;
    let min_rot = cfg.min_rot_step_deg.to_radians();
    let mut evals = 0;

    while rot_step >= min_rot && evals < cfg.max_evals {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [1.0f64, -1.0] {
                // Rotation about the object origin: translation unchanged.
                let mut w = Vec3::zeros();
                w[axis] = sign * rot_step;
                let cand = Pose::from_parts(rotation_exp(&w) * pose.rotation, pose.translation);
                evals += 1;
                let s = score_pose(&cand, ctx, mesh, k)?;
                if s > score {
                    pose = cand;
                    score = s;
                    improved = true;
                }

                let mut t = Vec3::zeros();
                t[axis] = sign * trans_step;
                let cand = Pose::from_parts(pose.rotation, pose.translation + t);
                evals += 1;
                let s = score_pose(&cand, ctx, mesh, k)?;
                if s > score {
                    pose = cand;
                    score = s;
                    improved = true;
                }
                if evals >= cfg.max_evals {
                    break;
                }
            }
            if evals >= cfg.max_evals {
                break;
            }
        }
        if !improved {
            rot_step *= cfg.shrink;
            trans_step *= cfg.shrink;
        }
    }

    Ok(PoseEstimate {
        pose: pose.orthonormalized(),
        score,
        inliers: start.inliers,
        stage: Stage::Refined,
    })
}

/// Minimum overlapping valid depth pixels required by
/// [`refine_with_depth`].
pub const MIN_DEPTH_PIXELS: usize = 20;

/// Shifts the translation along the viewing ray through the rendered mask
/// centroid so the median rendered depth matches the median observed depth
/// over the intersection mask. Rotation is untouched. Because a camera-
/// frame translation adds a constant to every surface depth, the medians
/// match exactly after the shift.
pub fn refine_with_depth(
    pose: &Pose,
    depth: &ScalarImage,
    mesh: &TriangleMesh,
    k: &Intrinsics,
) -> Result<PoseEstimate> {
    let rb = crate::raster::render(mesh, pose, k);
    if depth.width != rb.depth.width || depth.height != rb.depth.height {
        return Err(Error::ResolutionMismatch {
            got_w: depth.width,
            got_h: depth.height,
            want_w: rb.depth.width,
            want_h: rb.depth.height,
        });
    }
    let mut rendered = Vec::new();
    let mut observed = Vec::new();
    let mut cx = 0.0;
    let mut cy = 0.0;
    for y in 0..rb.mask.height {
        for x in 0..rb.mask.width {
            if !rb.mask.at(x, y) {
                continue;
            }
            let o = depth.at(x, y);
            if !(o.is_finite() && o > 0.0) {
                continue;
            }
            rendered.push(rb.depth.at(x, y) as f64);
            observed.push(o as f64);
            cx += x as f64 + 0.5;
            cy += y as f64 + 0.5;
        }
    }
    if rendered.len() < MIN_DEPTH_PIXELS {
        return Err(Error::InsufficientDepth {
            needed: MIN_DEPTH_PIXELS,
            got: rendered.len(),
        });
    }
    let n = rendered.len() as f64;
    let ray = k.ray(cx / n, cy / n);
    let delta = (median(&mut observed) - median(&mut rendered)) / ray.z;
    Ok(PoseEstimate {
        pose: Pose::from_parts(pose.rotation, pose.translation + delta * ray),
        score: 0.0,
        inliers: rendered.len(),
        stage: Stage::DepthRefined,
    })
}

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    values.sort_by(|a, b| a.total_cmp(b));
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_procedural_object;

    fn depth_setup() -> (TriangleMesh, Pose, Intrinsics) {
        let mesh = make_procedural_object(2);
        let pose = crate::geometry::sample_hemisphere_poses(1, (2.0, 2.2), 5).unwrap()[0];
        let k = Intrinsics::new(90.0, 90.0, 32.0, 32.0, 64, 64).unwrap();
        (mesh, pose, k)
    }

    #[test]
    fn matching_depth_leaves_pose_unchanged() {
        let (mesh, pose, k) = depth_setup();
        let rb = crate::raster::render(&mesh, &pose, &k);
        let depth = ScalarImage {
            width: 64,
            height: 64,
            data: rb
                .depth
                .data
                .iter()
                .map(|&d| if d.is_finite() { d } else { 0.0 })
                .collect(),
        };
        let out = refine_with_depth(&pose, &depth, &mesh, &k).unwrap();
        assert!((out.pose.translation - pose.translation).norm() < 1e-9);
        assert_eq!(out.pose.rotation, pose.rotation);
        assert_eq!(out.stage, Stage::DepthRefined);
    }

    #[test]
    fn scaled_depth_shifts_translation_along_ray() {
        let (mesh, pose, k) = depth_setup();
        let rb = crate::raster::render(&mesh, &pose, &k);
        let mut rendered: Vec<f64> = Vec::new();
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut n = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                if rb.mask.at(x, y) {
                    rendered.push(rb.depth.at(x, y) as f64);
                    cx += x as f64 + 0.5;
                    cy += y as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        let depth = ScalarImage {
            width: 64,
            height: 64,
            data: rb
                .depth
                .data
                .iter()
                .map(|&d| if d.is_finite() { 1.1 * d } else { 0.0 })
                .collect(),
        };
        let out = refine_with_depth(&pose, &depth, &mesh, &k).unwrap();
        // Expected analytic shift.
        let med = median(&mut rendered);
        let ray = k.ray(cx / n, cy / n);
        let expected = pose.translation + (1.1 * med - med) / ray.z * ray;
        assert!((out.pose.translation - expected).norm() < 1e-6);
        assert_eq!(out.pose.rotation, pose.rotation);
    }

    #[test]
    fn invalid_depth_errors() {
        let (mesh, pose, k) = depth_setup();
        let depth = ScalarImage::filled(64, 64, 0.0);
        assert!(matches!(
            refine_with_depth(&pose, &depth, &mesh, &k),
            Err(Error::InsufficientDepth { .. })
        ));
    }
}
