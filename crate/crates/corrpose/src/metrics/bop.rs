//! Symmetry-aware discrepancies and their averaged recall.
//!
//! Threshold grids follow the benchmark conventions: recalls averaged over
//! correctness thresholds of 5%..50% of the object diameter (surface
//! distance), 5r..50r pixels with `r = width/640` (projection distance),
//! and over both the misalignment tolerance and threshold grids for the
//! visual discrepancy. All grids live in [`MetricConfig`], mirrored by
//! `configs/metrics.json`.

use serde::{Deserialize, Serialize};

use super::{EvalRecord, SymmetrySet};
use crate::error::{Error, Result};
use crate::geometry::{compose, project, Intrinsics, PointCloud, Pose, TriangleMesh};
use crate::img::ScalarImage;

/// Maximum symmetry-aware surface distance: `min_s max_x |est(x) - gt(s(x))|`.
pub fn mssd(est: &Pose, gt: &Pose, cloud: &PointCloud, sym: &SymmetrySet) -> f64 {
    let mut best = f64::INFINITY;
    for s in &sym.transforms {
        let gts = compose(gt, s);
        let mut worst = 0.0f64;
        for p in &cloud.points {
            worst = worst.max((est.transform_point(p) - gts.transform_point(p)).norm());
            if worst >= best {
                break;
            }
        }
        best = best.min(worst);
    }
    best
}

/// Maximum symmetry-aware projection distance in pixels. Points at or
/// behind the camera are excluded; errors when every point of every
/// symmetry is excluded.
pub fn mspd(
    est: &Pose,
    gt: &Pose,
    cloud: &PointCloud,
    sym: &SymmetrySet,
    k: &Intrinsics,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    let mut any_valid = false;
    for s in &sym.transforms {
        let gts = compose(gt, s);
        let mut worst = 0.0f64;
        let mut valid = false;
        for p in &cloud.points {
            let (Some(pe), Some(pg)) = (project(p, est, k), project(p, &gts, k)) else {
                continue;
            };
            valid = true;
            worst = worst.max((pe - pg).norm());
        }
        if valid {
            any_valid = true;
            best = best.min(worst);
        }
    }
    if !any_valid {
        return Err(Error::invalid(
            "mspd",
            "all points behind the camera for every symmetry",
        ));
    }
    Ok(best)
}

/// Visual surface discrepancy: renders depth at both poses and reports the
/// fraction of pixels in the visibility union whose depths disagree by
/// more than `tau` (absent surfaces count as disagreement). With a scene
/// depth image, pixels occluded beyond `delta` are dropped from the
/// visibility masks.
pub fn vsd(
    est: &Pose,
    gt: &Pose,
    mesh: &TriangleMesh,
    k: &Intrinsics,
    tau: f64,
    delta: f64,
    scene_depth: Option<&ScalarImage>,
) -> f64 {
    let re = crate::raster::render(mesh, est, k);
    let rg = crate::raster::render(mesh, gt, k);
    let visible = |mask: bool, d: f32, i: usize| -> bool {
        if !mask {
            return false;
        }
        match scene_depth {
            Some(scene) => {
                let s = scene.data[i];
                !(s.is_finite() && s > 0.0) || (d as f64) <= s as f64 + delta
            }
            None => true,
        }
    };
    let mut union = 0usize;
    let mut bad = 0usize;
    for i in 0..re.mask.data.len() {
        let ve = visible(re.mask.data[i], re.depth.data[i], i);
        let vg = visible(rg.mask.data[i], rg.depth.data[i], i);
        if !(ve || vg) {
            continue;
        }
        union += 1;
        if !(ve && vg) || (re.depth.data[i] as f64 - rg.depth.data[i] as f64).abs() > tau {
            bad += 1;
        }
    }
    if union == 0 {
        return 1.0;
    }
    bad as f64 / union as f64
}

/// Threshold grids and tolerances for [`ar_bop`]. Distances are expressed
/// as fractions of the object diameter so the grids are unit-agnostic;
/// projection thresholds are multiples of `r = width / 640`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MetricConfig {
    pub vsd_taus: Vec<f64>,
    pub vsd_thresholds: Vec<f64>,
    /// Occlusion tolerance for visibility masks, fraction of diameter.
    pub vsd_delta: f64,
    pub mssd_thresholds: Vec<f64>,
    pub mspd_thresholds: Vec<f64>,
    /// Records below this visible fraction are skipped.
    pub min_visible_fraction: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
        Self {
            vsd_taus: grid.clone(),
            vsd_thresholds: grid.clone(),
            vsd_delta: 0.05,
            mssd_thresholds: grid,
            mspd_thresholds: (1..=10).map(|i| i as f64 * 5.0).collect(),
            min_visible_fraction: 0.10,
        }
    }
}

/// Per-object inputs for [`ar_bop`].
pub struct ObjectData<'a> {
    pub cloud: &'a PointCloud,
    pub mesh: &'a TriangleMesh,
    pub sym: &'a SymmetrySet,
    pub intrinsics: &'a Intrinsics,
    pub diameter: f64,
    /// Scene depth per record for occlusion-aware VSD visibility, aligned
    /// with the record list when present.
    pub scene_depths: Option<&'a [ScalarImage]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArBreakdown {
    pub ar: f64,
    pub ar_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    pub records_used: usize,
    pub records_filtered: usize,
}

/// Average recall over the three discrepancy metrics and their threshold
/// grids, after the visibility filter.
pub fn ar_bop(records: &[EvalRecord], data: &ObjectData, cfg: &MetricConfig) -> Result<ArBreakdown> {
    if records.is_empty() {
        return Err(Error::invalid("ar_bop", "no records"));
    }
    let kept: Vec<(usize, &EvalRecord)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.visible_fraction >= cfg.min_visible_fraction)
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid(
            "ar_bop",
            "every record fell below the visibility threshold",
        ));
    }

    let r_px = data.intrinsics.width as f64 / 640.0;
    let mut vsd_hits = 0usize;
    let mut vsd_total = 0usize;
    let mut mssd_hits = 0usize;
    let mut mssd_total = 0usize;
    let mut mspd_hits = 0usize;
    let mut mspd_total = 0usize;

    for (idx, rec) in &kept {
        let e_mssd = mssd(&rec.estimated, &rec.ground_truth, data.cloud, data.sym) / data.diameter;
        for &th in &cfg.mssd_thresholds {
            mssd_total += 1;
            if e_mssd < th {
                mssd_hits += 1;
            }
        }

        let e_mspd = mspd(
            &rec.estimated,
            &rec.ground_truth,
            data.cloud,
            data.sym,
            data.intrinsics,
        )?;
        for &th in &cfg.mspd_thresholds {
            mspd_total += 1;
            if e_mspd < th * r_px {
                mspd_hits += 1;
            }
        }

        let scene = data.scene_depths.map(|s| &s[*idx]);
        for &tau_frac in &cfg.vsd_taus {
            let e = vsd(
                &rec.estimated,
                &rec.ground_truth,
                data.mesh,
                data.intrinsics,
                tau_frac * data.diameter,
                cfg.vsd_delta * data.diameter,
                scene,
            );
            for &th in &cfg.vsd_thresholds {
                vsd_total += 1;
                if e < th {
                    vsd_hits += 1;
                }
            }
        }
    }

    let ar_vsd = vsd_hits as f64 / vsd_total as f64;
    let ar_mssd = mssd_hits as f64 / mssd_total as f64;
    let ar_mspd = mspd_hits as f64 / mspd_total as f64;
    Ok(ArBreakdown {
        ar: (ar_vsd + ar_mssd + ar_mspd) / 3.0,
        ar_vsd,
        ar_mssd,
        ar_mspd,
        records_used: kept.len(),
        records_filtered: records.len() - kept.len(),
    })
}
