//! Pose-error metrics: ADD(-S), the 5cm/5deg criterion, the symmetry-aware
//! surface/projection/visual discrepancies with their averaged recall, and
//! the forward Chamfer reconstruction error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_geodesic_deg, PointCloud, Pose};
use crate::io::PoseJson;
use crate::spatial::KdTree;

mod bop;

pub use bop::{ar_bop, mspd, mssd, vsd, ArBreakdown, MetricConfig, ObjectData};

/// Discrete symmetry transforms of an object; always contains the
/// identity, closure under composition verified at load.
#[derive(Debug, Clone)]
pub struct SymmetrySet {
    pub transforms: Vec<Pose>,
}

impl SymmetrySet {
    pub fn identity_only() -> Self {
        Self {
            transforms: vec![Pose::identity()],
        }
    }

    /// Builds a set, prepending the identity when absent and checking that
    /// composing any two members lands on a member (tolerance 1e-6).
    pub fn new(mut transforms: Vec<Pose>) -> Result<Self> {
        let has_identity = transforms.iter().any(|p| is_identity(p, 1e-9));
        if !has_identity {
            transforms.insert(0, Pose::identity());
        }
        for a in &transforms {
            for b in &transforms {
                let c = crate::geometry::compose(a, b);
                if !transforms.iter().any(|m| pose_distance(m, &c) < 1e-6) {
                    return Err(Error::invalid(
                        "symmetry set",
                        "not closed under composition",
                    ));
                }
            }
        }
        Ok(Self { transforms })
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

fn is_identity(p: &Pose, tol: f64) -> bool {
    pose_distance(p, &Pose::identity()) < tol
}

fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    (a.rotation - b.rotation).norm() + (a.translation - b.translation).norm()
}

/// JSON form: a list of pose objects.
#[derive(Debug, Serialize, Deserialize)]
pub struct SymmetrySetJson {
    pub transforms: Vec<PoseJson>,
}

impl SymmetrySet {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let j: SymmetrySetJson = serde_json::from_slice(&std::fs::read(path)?)?;
        let transforms = j
            .transforms
            .iter()
            .map(Pose::try_from)
            .collect::<Result<Vec<_>>>()?;
        Self::new(transforms)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let j = SymmetrySetJson {
            transforms: self.transforms.iter().map(PoseJson::from).collect(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&j)?)?;
        Ok(())
    }
}

/// One evaluated frame.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub estimated: Pose,
    pub ground_truth: Pose,
    /// Visible object fraction, used by the occlusion filter.
    pub visible_fraction: f64,
}

/// Mean distance between corresponding model points under the two poses.
pub fn add(est: &Pose, gt: &Pose, cloud: &PointCloud) -> f64 {
    let mut acc = 0.0;
    for p in &cloud.points {
        acc += (est.transform_point(p) - gt.transform_point(p)).norm();
    }
    acc / cloud.len() as f64
}

/// Symmetric variant: mean nearest-neighbor distance from estimated-pose
/// points to ground-truth-pose points.
pub fn add_s(est: &Pose, gt: &Pose, cloud: &PointCloud) -> f64 {
    let gt_points: Vec<crate::geometry::Pt3> =
        cloud.points.iter().map(|p| gt.transform_point(p)).collect();
    let tree = KdTree::build(&gt_points);
    let mut acc = 0.0;
    for p in &cloud.points {
        let q = est.transform_point(p);
        acc += tree.nearest(&q).expect("non-empty cloud").1.sqrt();
    }
    acc / cloud.len() as f64
}

/// Translation error (meters), geodesic rotation error (degrees), and the
/// joint success flag at 5 cm / 5 degrees. `unit_scale` converts model
/// units to meters (units per meter).
pub fn pose_error_5cm5deg(est: &Pose, gt: &Pose, unit_scale: f64) -> (f64, f64, bool) {
    let trans_m = (est.translation - gt.translation).norm() / unit_scale;
    let rot_deg = rotation_geodesic_deg(&est.rotation, &gt.rotation);
    (trans_m, rot_deg, trans_m <= 0.05 && rot_deg <= 5.0)
}

/// Mean nearest-neighbor distance from each reconstruction point to the
/// reference cloud.
pub fn chamfer_forward(recon: &PointCloud, reference: &PointCloud) -> Result<f64> {
    if recon.is_empty() || reference.is_empty() {
        return Err(Error::invalid("chamfer", "clouds must be non-empty"));
    }
    let tree = KdTree::build(&reference.points);
    let mut acc = 0.0;
    for p in &recon.points {
        acc += tree.nearest(p).unwrap().1.sqrt();
    }
    Ok(acc / recon.len() as f64)
}
