//! Scale-aware rigid registration: closed-form Umeyama alignment of
//! matched point sets and trimmed scaled-ICP between unmatched clouds.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, Pt3, Vec3};
use crate::spatial::KdTree;

/// Similarity transform `x -> scale * R * x + t`.
#[derive(Debug, Clone, Copy)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Pt3) -> Pt3 {
        Pt3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        Sim3 {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// JSON form of [`Sim3`]: row-major rotation, like the pose format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sim3Json {
    pub scale: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Sim3> for Sim3Json {
    fn from(s: &Sim3) -> Self {
        let r = &s.rotation;
        Sim3Json {
            scale: s.scale,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [s.translation.x, s.translation.y, s.translation.z],
        }
    }
}

impl TryFrom<&Sim3Json> for Sim3 {
    type Error = Error;

    fn try_from(j: &Sim3Json) -> Result<Sim3> {
        if !(j.scale > 0.0) {
            return Err(Error::invalid("sim3", "scale must be > 0"));
        }
        let r = j.rotation;
        let rot = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        let pose = crate::geometry::Pose::new(rot, Vec3::zeros())?;
        Ok(Sim3 {
            scale: j.scale,
            rotation: pose.rotation,
            translation: Vec3::new(j.translation[0], j.translation[1], j.translation[2]),
        })
    }
}

/// Least-squares similarity transform mapping `src` onto `dst`
/// (matched by index). With `with_scale` false the scale is fixed to 1.
pub fn umeyama(src: &PointCloud, dst: &PointCloud, with_scale: bool) -> Result<Sim3> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::invalid(
            "umeyama",
            format!("need equal lengths >= 3, got {} and {}", src.len(), dst.len()),
        ));
    }
    let n = src.len() as f64;
    let mu_s = src.centroid();
    let mu_d = dst.centroid();

    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (p, q) in src.points.iter().zip(dst.points.iter()) {
        let ds = p - mu_s;
        let dd = q - mu_d;
        cov += dd * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateCloud("correspondence covariance rank < 2".into()));
    }
    let mut s_diag = Vec3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&s_diag) * vt;

    let scale = if with_scale {
        let trace_ds = svd.singular_values.dot(&s_diag);
        trace_ds / var_s
    } else {
        1.0
    };
    let translation = mu_d.coords - scale * (rotation * mu_s.coords);
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the relative residual improvement falls below this.
    pub tolerance: f64,
    /// Fraction of worst matches discarded each iteration.
    pub trim_fraction: f64,
    pub with_scale: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            trim_fraction: 0.10,
            with_scale: true,
        }
    }
}

/// Trimmed scaled ICP: alternates nearest-neighbor matching against `dst`
/// with Umeyama updates. The reported RMS residual (over kept matches) is
/// non-increasing; an update that would worsen it is rejected and the
/// iteration stops.
pub fn scaled_icp(
    src: &PointCloud,
    dst: &PointCloud,
    init: &Sim3,
    cfg: &IcpConfig,
) -> Result<(Sim3, f64)> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::invalid("icp", "clouds must be non-empty"));
    }
    let tree = KdTree::build(&dst.points);
    let mut transform = *init;
    let mut residual = trimmed_rms(src, dst, &tree, &transform, cfg.trim_fraction).0;

    for _ in 0..cfg.max_iterations {
        let (_, kept) = trimmed_rms(src, dst, &tree, &transform, cfg.trim_fraction);
        let moved: Vec<Pt3> = kept.iter().map(|&(i, _)| transform.apply(&src.points[i])).collect();
        let matched: Vec<Pt3> = kept.iter().map(|&(_, j)| dst.points[j]).collect();
        let delta = match umeyama(
            &PointCloud::new(moved),
            &PointCloud::new(matched),
            cfg.with_scale,
        ) {
            Ok(d) => d,
            Err(e) => return Err(e),
        };
        let candidate = delta.compose(&transform);
        let next = trimmed_rms(src, dst, &tree, &candidate, cfg.trim_fraction).0;
        if next > residual {
            break;
        }
        let improved = residual - next;
        transform = candidate;
        let stop = improved < cfg.tolerance * residual.max(1e-300);
        residual = next;
        if stop {
            break;
        }
    }
    Ok((transform, residual))
}

/// RMS over the best `1 - trim` fraction of nearest-neighbor matches,
/// plus the kept (src, dst) index pairs.
fn trimmed_rms(
    src: &PointCloud,
    dst: &PointCloud,
    tree: &KdTree,
    transform: &Sim3,
    trim: f64,
) -> (f64, Vec<(usize, usize)>) {
    let _ = dst;
    let mut matches: Vec<(f64, usize, usize)> = src
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (j, d2) = tree.nearest(&transform.apply(p)).expect("dst non-empty");
            (d2, i, j)
        })
        .collect();
    matches.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((src.len() as f64 * (1.0 - trim)).ceil() as usize).clamp(1, src.len());
    let kept = &matches[..keep];
    let ms = kept.iter().map(|m| m.0).sum::<f64>() / keep as f64;
    (ms.sqrt(), kept.iter().map(|m| (m.1, m.2)).collect())
}
