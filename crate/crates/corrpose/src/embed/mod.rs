//! Dense 2D-3D correspondence features.
//!
//! A coordinate field (`KeyField`, sinusoidal MLP) maps object-surface
//! points to `R^d` features; a small convolutional network (`QueryNet`)
//! maps images to per-pixel features plus an object-mask logit. The two
//! are trained jointly with an InfoNCE contrastive loss and a mask
//! cross-entropy. Forward and backward passes are hand-written and
//! verified against central finite differences (`grad_check`).
//!
//! `AnalyticKeyField` is a training-free random-Fourier-feature stand-in
//! with the same interface, used to exercise the pose-estimation path in
//! isolation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, Pt3};


mod analytic;
mod convnet;
mod gradcheck;
mod loss;
mod siren;
mod train;

pub use analytic::{analytic_embedding, analytic_query_maps, AnalyticKeyField};
pub use convnet::{query_eval, QueryNet};
pub use gradcheck::{grad_check, grad_check_keyfield_infonce, grad_check_querynet_mask};
pub use loss::{infonce_loss, mask_loss, InfoNceBatch};
pub use siren::KeyField;
pub use train::{train, EpochStats, TrainConfig, TrainOutput};

/// Per-pixel feature map, pixel-major (`d` contiguous values per pixel).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, d: usize) -> Self {
        Self {
            width,
            height,
            d,
            data: vec![0.0; width * height * d],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.d;
        &self.data[i..i + self.d]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.d;
        &mut self.data[i..i + self.d]
    }
}

/// Common interface of the trained and analytic coordinate fields.
pub trait KeyModel {
    fn dim(&self) -> usize;
    fn norm_box(&self) -> &OrientedBox;
    /// Features for a batch of object-frame points, flattened `n x d`.
    /// Errors if a normalized point leaves `[-1, 1]^3` (beyond slack).
    fn eval(&self, pts: &[Pt3]) -> Result<Vec<f64>>;
}

/// Slack on the normalized-coordinate box check; rendered surface points
/// sit exactly on the box boundary up to interpolation rounding.
pub(crate) const BOX_SLACK: f64 = 1e-4;

pub(crate) fn normalize_points(norm_box: &OrientedBox, pts: &[Pt3]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pts.len() * 3);
    for p in pts {
        let n = norm_box.normalize(p);
        if n.x.abs() > 1.0 + BOX_SLACK || n.y.abs() > 1.0 + BOX_SLACK || n.z.abs() > 1.0 + BOX_SLACK {
            return Err(Error::OutOfBox([p.x, p.y, p.z]));
        }
        out.extend_from_slice(&[n.x, n.y, n.z]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then raw little-endian f32 parameters.

#[derive(Debug)]
pub enum ModelCheckpoint {
    Trained { key: KeyField, query: QueryNet },
    Analytic { key: AnalyticKeyField },
}

impl ModelCheckpoint {
    pub fn key_model(&self) -> &dyn KeyModel {
        match self {
            ModelCheckpoint::Trained { key, .. } => key,
            ModelCheckpoint::Analytic { key } => key,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxJson {
    center: [f64; 3],
    axes: [f64; 9],
    half_extents: [f64; 3],
}

impl From<&OrientedBox> for BoxJson {
    fn from(b: &OrientedBox) -> Self {
        let a = &b.axes;
        BoxJson {
            center: [b.center.x, b.center.y, b.center.z],
            axes: [
                a[(0, 0)],
                a[(0, 1)],
                a[(0, 2)],
                a[(1, 0)],
                a[(1, 1)],
                a[(1, 2)],
                a[(2, 0)],
                a[(2, 1)],
                a[(2, 2)],
            ],
            half_extents: [b.half_extents.x, b.half_extents.y, b.half_extents.z],
        }
    }
}

impl From<&BoxJson> for OrientedBox {
    fn from(j: &BoxJson) -> Self {
        let a = j.axes;
        OrientedBox {
            center: Pt3::new(j.center[0], j.center[1], j.center[2]),
            axes: crate::geometry::Mat3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            half_extents: crate::geometry::Vec3::new(
                j.half_extents[0],
                j.half_extents[1],
                j.half_extents[2],
            ),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    d: usize,
    seed: u64,
    norm_box: BoxJson,
    #[serde(default)]
    omega0: f64,
    #[serde(default)]
    key_dims: Vec<usize>,
    #[serde(default)]
    query_hidden: usize,
    #[serde(default)]
    query_resolution: usize,
    #[serde(default)]
    key_param_count: usize,
    #[serde(default)]
    query_param_count: usize,
}

pub fn save_model(model: &ModelCheckpoint, path: &Path) -> Result<()> {
    let (header, blob) = match model {
        ModelCheckpoint::Trained { key, query } => {
            let header = CheckpointHeader {
                kind: "siren".into(),
                d: key.d(),
                seed: key.seed,
                norm_box: BoxJson::from(&key.norm_box),
                omega0: key.omega0,
                key_dims: key.dims.clone(),
                query_hidden: query.hidden,
                query_resolution: query.resolution,
                key_param_count: key.params.len(),
                query_param_count: query.params.len(),
            };
            let mut blob = Vec::with_capacity((key.params.len() + query.params.len()) * 4);
            for v in key.params.iter().chain(query.params.iter()) {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            (header, blob)
        }
        ModelCheckpoint::Analytic { key } => (
            CheckpointHeader {
                kind: "analytic".into(),
                d: key.dim(),
                seed: key.seed,
                norm_box: BoxJson::from(&key.norm_box),
                omega0: 0.0,
                key_dims: vec![],
                query_hidden: 0,
                query_resolution: 0,
                key_param_count: 0,
                query_param_count: 0,
            },
            Vec::new(),
        ),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&blob);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            what: path.display().to_string(),
            why: "missing header line".into(),
        })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let blob = &bytes[nl + 1..];
    let floats: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    match header.kind.as_str() {
        "analytic" => Ok(ModelCheckpoint::Analytic {
            key: AnalyticKeyField::new(header.seed, header.d, OrientedBox::from(&header.norm_box)),
        }),
        "siren" => {
            if floats.len() != header.key_param_count + header.query_param_count {
                return Err(Error::Parse {
                    what: path.display().to_string(),
                    why: format!(
                        "parameter blob has {} values, header says {}",
                        floats.len(),
                        header.key_param_count + header.query_param_count
                    ),
                });
            }
            let mut key = KeyField::with_dims(
                header.key_dims.clone(),
                header.omega0,
                OrientedBox::from(&header.norm_box),
                header.seed,
            )?;
            key.params.copy_from_slice(&floats[..header.key_param_count]);
            let mut query = QueryNet::new(header.query_hidden, header.d, header.query_resolution, header.seed)?;
            query.params.copy_from_slice(&floats[header.key_param_count..]);
            Ok(ModelCheckpoint::Trained { key, query })
        }
        k => Err(Error::Parse {
            what: path.display().to_string(),
            why: format!("unknown checkpoint kind '{k}'"),
        }),
    }
}

/// Logistic squashing used by the mask head.
#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
