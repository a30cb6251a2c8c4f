//! Joint training of the key and query networks.
//!
//! One iteration = one training image: online augmentation (affine,
//! cut-and-paste, color, white balance), a query forward pass, InfoNCE
//! over sampled mask pixels against shared surface negatives, plus the
//! dense mask cross-entropy. Adam updates both parameter vectors.
//! Everything is seeded, single-threaded, bit-deterministic per seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{mask_loss_with_logits, InfoNceBatch};
use super::{KeyField, QueryNet};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox, PointCloud, Pt3};
use crate::synth::{
    affine_augment, color_augment, cut_and_paste, white_balance_augment, AffineAugmentConfig,
    ColorAugmentConfig, CutPasteConfig, ImagePool, SceneSample, SceneSource,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Feature dimension.
    pub d: usize,
    pub epochs: usize,
    /// Positive pixels sampled per image.
    pub batch_pixels: usize,
    pub learning_rate: f64,
    /// Shared negatives per iteration.
    pub n_neg: usize,
    pub seed: u64,
    /// Logit scale is `1 / temperature`.
    pub temperature: f64,
    pub key_hidden: usize,
    pub key_layers: usize,
    pub omega0: f64,
    pub query_hidden: usize,
    pub augment: bool,
    pub cut_paste: CutPasteConfig,
    pub color: ColorAugmentConfig,
    pub affine: AffineAugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 12,
            epochs: 50,
            batch_pixels: 128,
            learning_rate: 1e-3,
            n_neg: 256,
            seed: 0,
            temperature: 1.0,
            key_hidden: 32,
            key_layers: 2,
            omega0: 30.0,
            query_hidden: 16,
            augment: true,
            cut_paste: CutPasteConfig::default(),
            color: ColorAugmentConfig::default(),
            affine: AffineAugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config("feature dim must be >= 2".into()));
        }
        if self.n_neg < 1 {
            return Err(Error::Config("n_neg must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch_pixels == 0 {
            return Err(Error::Config("epochs and batch_pixels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub infonce: f64,
    pub mask: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub key: KeyField,
    pub query: QueryNet,
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Trains a key field and query network on the given samples.
///
/// `cloud` provides the surface points used as negatives; `norm_box` is
/// the object's bounding box used to normalize key-field inputs. It must
/// contain every rendered surface coordinate — fit it to the mesh
/// vertices, which bound the interpolated surface. Per-epoch means of
/// both losses are returned and logged.
pub fn train(
    source: &dyn SceneSource,
    cloud: &PointCloud,
    norm_box: OrientedBox,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if cloud.is_empty() {
        return Err(Error::Config("empty surface cloud".into()));
    }

    // Materialize once; toy-scale sets fit in memory.
    let mut samples = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        samples.push(source.get(i)?);
    }
    let resolution = samples[0].color.width;

    let mut key = KeyField::new(cfg.d, cfg.key_hidden, cfg.key_layers, cfg.omega0, norm_box, cfg.seed)?;
    let mut query = QueryNet::new(cfg.query_hidden, cfg.d, resolution, cfg.seed)?;

    let mut adam_key = Adam::new(key.params.len(), cfg.learning_rate);
    let mut adam_query = Adam::new(query.params.len(), cfg.learning_rate);
    let mut key_grads = vec![0.0; key.params.len()];
    let mut query_grads = vec![0.0; query.params.len()];

    let pool = ImagePool::Procedural;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut nce_sum = 0.0;
        let mut mask_sum = 0.0;
        for idx in 0..samples.len() {
            let iter_seed = crate::rng::indexed_stream(cfg.seed, b"train-iter", step).random::<u64>();
            let sample = prepare_sample(&samples[idx], cfg, &pool, iter_seed)?;

            let (loss_nce, loss_mask) = train_step(
                &sample,
                cloud,
                cfg,
                &mut key,
                &mut query,
                &mut key_grads,
                &mut query_grads,
                iter_seed,
            )?;
            let total = loss_nce + loss_mask;
            if !total.is_finite() {
                return Err(Error::Divergence { step: step as usize });
            }
            adam_key.step(&mut key.params, &key_grads);
            adam_query.step(&mut query.params, &query_grads);
            nce_sum += loss_nce;
            mask_sum += loss_mask;
            step += 1;
        }
        let n = samples.len() as f64;
        let stats = EpochStats {
            epoch,
            infonce: nce_sum / n,
            mask: mask_sum / n,
            total: (nce_sum + mask_sum) / n,
        };
        log::info!(
            "epoch {:3}: infonce {:.4}  mask {:.4}",
            stats.epoch,
            stats.infonce,
            stats.mask
        );
        epochs.push(stats);
    }

    Ok(TrainOutput {
        key,
        query,
        epochs,
    })
}

fn prepare_sample(
    sample: &SceneSample,
    cfg: &TrainConfig,
    pool: &ImagePool,
    iter_seed: u64,
) -> Result<SceneSample> {
    if !cfg.augment {
        return Ok(sample.clone());
    }
    let warped = affine_augment(sample, &cfg.affine, iter_seed ^ 0x01);
    let mut pasted = cut_and_paste(&warped, pool, pool, &cfg.cut_paste, iter_seed ^ 0x02)?;
    pasted.color = color_augment(&pasted.color, &cfg.color, iter_seed ^ 0x03);
    pasted.color = white_balance_augment(&pasted.color, iter_seed ^ 0x04);
    Ok(pasted)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    sample: &SceneSample,
    cloud: &PointCloud,
    cfg: &TrainConfig,
    key: &mut KeyField,
    query: &mut QueryNet,
    key_grads: &mut [f64],
    query_grads: &mut [f64],
    iter_seed: u64,
) -> Result<(f64, f64)> {
    key_grads.fill(0.0);
    query_grads.fill(0.0);
    let mut rng = crate::rng::stream(iter_seed, b"train-step");

    let (features, logits, tape) = query.forward(&sample.color)?;
    let d = cfg.d;

    // Positive pixels: uniform over the visible mask.
    let masked: Vec<usize> = (0..sample.mask.data.len())
        .filter(|&i| sample.mask.data[i])
        .collect();
    if masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n_pos = cfg.batch_pixels.min(masked.len());
    let mut pos_idx = Vec::with_capacity(n_pos);
    let mut pos_pts = Vec::with_capacity(n_pos);
    let mut queries = Vec::with_capacity(n_pos * d);
    for _ in 0..n_pos {
        let i = masked[(rng.random::<u32>() as usize) % masked.len()];
        let c = sample.coords.data[i];
        pos_idx.push(i);
        pos_pts.push(Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64));
        queries.extend_from_slice(&features.data[i * d..(i + 1) * d]);
    }

    // Shared negatives: uniform surface samples.
    let neg_pts: Vec<Pt3> = (0..cfg.n_neg)
        .map(|_| cloud.points[(rng.random::<u32>() as usize) % cloud.len()])
        .collect();

    let pos_norm = super::normalize_points(&key.norm_box, &pos_pts)?;
    let neg_norm = super::normalize_points(&key.norm_box, &neg_pts)?;
    let (k_pos, tape_pos) = key.forward(&pos_norm);
    let (k_neg, tape_neg) = key.forward(&neg_norm);

    let nce = InfoNceBatch::compute(&queries, &k_pos, &k_neg, d, cfg.temperature);
    let (mask_l, dlogits) = mask_loss_with_logits(&logits, &sample.mask);

    // Backward: key field takes gradients from both positives and negatives;
    // the query net takes sparse feature gradients plus the dense mask term.
    key.backward(&tape_pos, &nce.d_k_pos, key_grads);
    key.backward(&tape_neg, &nce.d_k_negs, key_grads);

    let mut dfeatures = vec![0.0; features.data.len()];
    for (s, &i) in pos_idx.iter().enumerate() {
        for c in 0..d {
            dfeatures[i * d + c] += nce.d_query[s * d + c];
        }
    }
    query.backward(&tape, &dfeatures, &dlogits, query_grads);

    Ok((nce.loss, mask_l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_procedural_object, Dataset, DatasetConfig};

    fn toy_setup(n: usize, res: usize) -> (Dataset, PointCloud, OrientedBox) {
        let mesh = make_procedural_object(1);
        let cloud = mesh.vertex_cloud();
        let norm_box = crate::geometry::fit_oriented_box(&cloud).unwrap();
        let ds = Dataset::new(
            mesh,
            DatasetConfig {
                n_images: n,
                resolution: res,
                seed: 7,
                ..DatasetConfig::default()
            },
        )
        .unwrap();
        (ds, cloud, norm_box)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            d: 6,
            epochs: 2,
            batch_pixels: 32,
            n_neg: 32,
            key_hidden: 12,
            key_layers: 1,
            query_hidden: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_training() {
        let (ds, cloud, nb) = toy_setup(4, 32);
        let a = train(&ds, &cloud, nb, &quick_cfg()).unwrap();
        let b = train(&ds, &cloud, nb, &quick_cfg()).unwrap();
        assert_eq!(a.key.params, b.key.params);
        assert_eq!(a.query.params, b.query.params);
        assert_eq!(a.epochs.len(), 2);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (ds, cloud, nb) = toy_setup(3, 32);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg()
        };
        let out = train(&ds, &cloud, nb, &cfg).unwrap();
        let fresh_key = KeyField::new(
            cfg.d,
            cfg.key_hidden,
            cfg.key_layers,
            cfg.omega0,
            out.key.norm_box,
            cfg.seed,
        )
        .unwrap();
        assert_eq!(out.key.params, fresh_key.params);
    }

    #[test]
    fn loss_decreases_on_toy_run() {
        let (ds, cloud, nb) = toy_setup(12, 32);
        let cfg = TrainConfig {
            epochs: 6,
            ..quick_cfg()
        };
        let out = train(&ds, &cloud, nb, &cfg).unwrap();
        let first = out.epochs.first().unwrap().infonce;
        let last = out.epochs.last().unwrap().infonce;
        assert!(
            last < first,
            "InfoNCE did not improve: {first:.4} -> {last:.4}"
        );
        assert!(out.epochs.iter().all(|e| e.total.is_finite()));
    }
}
