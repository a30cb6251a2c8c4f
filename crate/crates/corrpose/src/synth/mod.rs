//! Synthetic training data: renders of the object model from hemisphere
//! viewpoints, cropped tight around the object, plus the augmentation
//! stack applied online during training.
//!
//! Samples are generated lazily from `(seed, index)`-keyed RNG streams, so
//! the dataset is embarrassingly parallel and bit-deterministic regardless
//! of materialization order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_intrinsics, hemisphere_pose, Intrinsics, PointCloud, Pose, TriangleMesh};
use crate::img::{CoordMap, MaskImage, RgbImage};
use crate::io::PoseJson;
use crate::raster::render;

mod augment;
mod object;
mod pool;

pub use augment::{
    affine_augment, apply_white_balance, color_augment, cut_and_paste, warp_affine,
    white_balance_augment, AffineAugmentConfig, ColorAugmentConfig, CutPasteConfig,
    ILLUMINANT_GAINS,
};
pub use object::make_procedural_object;
pub use pool::ImagePool;

/// One synthetic training frame.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub color: RgbImage,
    pub coords: CoordMap,
    /// Ground-truth visible-object mask.
    pub mask: MaskImage,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// Masked-pixel count after augmentation over the count before.
    pub visible_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub resolution: usize,
    pub radius_range: (f64, f64),
    pub seed: u64,
    pub occlusion_range: (f64, f64),
    pub background_noise_prob: f64,
    pub crop_margin: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_images: 10_000,
            resolution: 224,
            radius_range: (1.8, 3.0),
            seed: 0,
            occlusion_range: (0.20, 0.70),
            background_noise_prob: 0.5,
            crop_margin: 0.05,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.occlusion_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("occlusion_range must satisfy 0 <= lo <= hi <= 1".into()));
        }
        if self.resolution == 0 || self.n_images == 0 {
            return Err(Error::Config("resolution and n_images must be >= 1".into()));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config("radius_range must satisfy 0 < r_min <= r_max".into()));
        }
        Ok(())
    }

    pub fn cut_paste(&self) -> CutPasteConfig {
        CutPasteConfig {
            occlusion_range: self.occlusion_range,
            background_noise_prob: self.background_noise_prob,
            ..CutPasteConfig::default()
        }
    }
}

/// Lazily generated training set. `sample(i)` is a pure function of
/// `(config.seed, i)`.
pub struct Dataset {
    mesh: TriangleMesh,
    cfg: DatasetConfig,
    base_k: Intrinsics,
    crop_cloud: PointCloud,
}

impl Dataset {
    pub fn new(mesh: TriangleMesh, cfg: DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        if mesh.faces.is_empty() {
            return Err(Error::invalid("mesh", "no faces"));
        }
        let res = cfg.resolution;
        let base_k = Intrinsics::new(
            res as f64 * 2.0,
            res as f64 * 2.0,
            res as f64 / 2.0,
            res as f64 / 2.0,
            res,
            res,
        )?;
        // Projected vertex extrema bound the projected surface, so the
        // vertex cloud is sufficient for crop fitting.
        let crop_cloud = mesh.vertex_cloud();
        Ok(Self {
            mesh,
            cfg,
            base_k,
            crop_cloud,
        })
    }

    pub fn len(&self) -> usize {
        self.cfg.n_images
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.n_images == 0
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.cfg
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn sample(&self, index: usize) -> Result<SceneSample> {
        if index >= self.cfg.n_images {
            return Err(Error::invalid("dataset", format!("index {index} out of range")));
        }
        let mut rng = crate::rng::indexed_stream(self.cfg.seed, b"synth-sample", index as u64);
        let pose = hemisphere_pose(&mut rng, self.cfg.radius_range);
        let k = crop_intrinsics(
            &self.crop_cloud,
            &pose,
            &self.base_k,
            self.cfg.resolution,
            self.cfg.crop_margin,
        )?;
        let rb = render(&self.mesh, &pose, &k);
        if rb.mask.count() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(SceneSample {
            color: rb.color,
            coords: rb.coords,
            mask: rb.mask,
            pose,
            intrinsics: k,
            visible_fraction: 1.0,
        })
    }
}

/// Materializes the whole dataset. Prefer [`Dataset`] for large `n_images`.
pub fn generate_dataset(mesh: &TriangleMesh, cfg: &DatasetConfig) -> Result<Vec<SceneSample>> {
    let ds = Dataset::new(mesh.clone(), cfg.clone())?;
    (0..ds.len()).map(|i| ds.sample(i)).collect()
}

// ---------------------------------------------------------------------------
// On-disk dataset

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub diameter: f64,
    pub samples: Vec<SampleMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub pose: PoseJson,
    pub intrinsics: Intrinsics,
    pub visible_fraction: f64,
}

/// Writes `meta.json` plus per-sample color/coords/mask files.
pub fn write_dataset_dir(dir: &Path, mesh: &TriangleMesh, cfg: &DatasetConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ds = Dataset::new(mesh.clone(), cfg.clone())?;
    let mut metas = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let s = ds.sample(i)?;
        crate::img::save_rgb_png(&s.color, &dir.join(format!("{i:05}_color.png")))?;
        crate::img::save_coord_map(&s.coords, &dir.join(format!("{i:05}_coords.f32")))?;
        crate::img::save_mask_png(&s.mask, &dir.join(format!("{i:05}_mask.png")))?;
        metas.push(SampleMeta {
            pose: PoseJson::from(&s.pose),
            intrinsics: s.intrinsics,
            visible_fraction: s.visible_fraction,
        });
    }
    crate::io::save_mesh_ply(mesh, &dir.join("object.ply"))?;
    let meta = DatasetMeta {
        config: cfg.clone(),
        diameter: mesh.diameter(),
        samples: metas,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Dataset stored on disk by [`write_dataset_dir`].
pub struct DiskDataset {
    dir: std::path::PathBuf,
    pub meta: DatasetMeta,
}

impl DiskDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> Result<SceneSample> {
        let m = &self.meta.samples[i];
        Ok(SceneSample {
            color: crate::img::load_rgb_png(&self.dir.join(format!("{i:05}_color.png")))?,
            coords: crate::img::load_coord_map(&self.dir.join(format!("{i:05}_coords.f32")))?,
            mask: crate::img::load_mask_png(&self.dir.join(format!("{i:05}_mask.png")))?,
            pose: Pose::try_from(&m.pose)?,
            intrinsics: m.intrinsics,
            visible_fraction: m.visible_fraction,
        })
    }

    pub fn mesh(&self) -> Result<TriangleMesh> {
        crate::io::load_mesh_ply(&self.dir.join("object.ply"))
    }
}

/// Uniform view over in-memory and lazily generated sample sources.
pub trait SceneSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<SceneSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SceneSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }
    fn get(&self, i: usize) -> Result<SceneSample> {
        self.sample(i)
    }
}

impl SceneSource for Vec<SceneSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn get(&self, i: usize) -> Result<SceneSample> {
        Ok(self[i].clone())
    }
}

impl SceneSource for DiskDataset {
    fn len(&self) -> usize {
        DiskDataset::len(self)
    }
    fn get(&self, i: usize) -> Result<SceneSample> {
        self.sample(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize, res: usize, seed: u64) -> Dataset {
        let mesh = make_procedural_object(1);
        let cfg = DatasetConfig {
            n_images: n,
            resolution: res,
            seed,
            ..DatasetConfig::default()
        };
        Dataset::new(mesh, cfg).unwrap()
    }

    #[test]
    fn defaults_match_training_setup() {
        let cfg = DatasetConfig::default();
        assert_eq!(cfg.n_images, 10_000);
        assert_eq!(cfg.resolution, 224);
        assert_eq!(cfg.occlusion_range, (0.20, 0.70));
        assert_eq!(cfg.background_noise_prob, 0.5);
    }

    #[test]
    fn default_dataset_is_10k_at_224() {
        let mesh = make_procedural_object(1);
        let ds = Dataset::new(mesh, DatasetConfig::default()).unwrap();
        assert_eq!(ds.len(), 10_000);
        let s = ds.sample(0).unwrap();
        assert_eq!(s.color.width, 224);
        assert_eq!(s.color.height, 224);
    }

    #[test]
    fn samples_are_deterministic_and_masked() {
        let ds = toy_dataset(8, 48, 3);
        for i in 0..8 {
            let a = ds.sample(i).unwrap();
            let b = ds.sample(i).unwrap();
            assert_eq!(a.color.data, b.color.data);
            assert_eq!(a.mask.data, b.mask.data);
            assert!(a.mask.count() > 0);
            assert_eq!(a.visible_fraction, 1.0);
        }
    }

    #[test]
    fn object_fills_crop() {
        let ds = toy_dataset(40, 64, 9);
        let mut filled = 0;
        for i in 0..40 {
            let s = ds.sample(i).unwrap();
            let (x0, y0, x1, y1) = s.mask.bounds().unwrap();
            let w = (x1 - x0 + 1) as f64 / 64.0;
            let h = (y1 - y0 + 1) as f64 / 64.0;
            if w.max(h) >= 0.5 {
                filled += 1;
            }
        }
        assert!(filled >= 38, "only {filled}/40 crops tight");
    }

    #[test]
    fn cut_and_paste_contract() {
        let ds = toy_dataset(4, 64, 5);
        let s = ds.sample(0).unwrap();
        let pool = ImagePool::Procedural;
        let cfg = CutPasteConfig::default();
        for seed in 0..50 {
            let out = cut_and_paste(&s, &pool, &pool, &cfg, seed).unwrap();
            let occ = 1.0 - out.mask.count() as f64 / s.mask.count() as f64;
            assert!(
                (0.20..=0.70).contains(&occ),
                "seed {seed}: occlusion {occ:.3}"
            );
            assert!((0.30..=0.80).contains(&out.visible_fraction));
            // Mask only where coords are defined.
            for i in 0..out.mask.data.len() {
                if out.mask.data[i] {
                    assert!(out.coords.data[i][0] < 1e29);
                    assert!(s.mask.data[i], "mask grew");
                }
            }
            // Pose and intrinsics untouched.
            assert_eq!(out.pose.rotation, s.pose.rotation);
            assert_eq!(out.intrinsics, s.intrinsics);
        }
    }

    #[test]
    fn color_augment_identity_and_range() {
        let ds = toy_dataset(1, 48, 2);
        let s = ds.sample(0).unwrap();
        let id = color_augment(&s.color, &ColorAugmentConfig::zero(), 99);
        for (a, b) in id.data.iter().zip(s.color.data.iter()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-6);
            }
        }
        let cfg = ColorAugmentConfig::default();
        for seed in 0..20 {
            let out = color_augment(&s.color, &cfg, seed);
            assert!(out.data.iter().all(|p| p.iter().all(|c| (0.0..=1.0).contains(c))));
            let again = color_augment(&s.color, &cfg, seed);
            assert_eq!(out.data, again.data);
        }
    }

    #[test]
    fn white_balance_gains() {
        let img = RgbImage::filled(4, 4, [0.25, 0.25, 0.25]);
        let id = apply_white_balance(&img, [1.0, 1.0, 1.0]);
        assert_eq!(id.data, img.data);
        let red = apply_white_balance(&img, [2.0, 1.0, 1.0]);
        assert!((red.data[0][0] - 0.5).abs() < 1e-6);
        assert!((red.data[0][1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn white_balance_means_shift_monotonically() {
        let ds = toy_dataset(1, 48, 8);
        let s = ds.sample(0).unwrap();
        let mut prev_red = -1.0f64;
        for g in [0.6f32, 0.8, 1.0, 1.2, 1.4] {
            let out = apply_white_balance(&s.color, [g, 1.0, 1.0]);
            let mean: f64 = out.data.iter().map(|p| p[0] as f64).sum::<f64>() / out.data.len() as f64;
            assert!(mean >= prev_red, "gain {g}: mean {mean} < {prev_red}");
            prev_red = mean;
        }
    }

    #[test]
    fn affine_identity_and_rotation() {
        let ds = toy_dataset(1, 64, 4);
        let s = ds.sample(0).unwrap();
        let id = affine_augment(&s, &AffineAugmentConfig::zero(), 7);
        assert_eq!(id.mask.data, s.mask.data);
        assert_eq!(id.pose.rotation, s.pose.rotation);
        for (a, b) in id.color.data.iter().zip(s.color.data.iter()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-5);
            }
        }

        let rot = warp_affine(&s, std::f64::consts::FRAC_PI_2, 1.0, (0.0, 0.0));
        let ratio = rot.mask.count() as f64 / s.mask.count() as f64;
        assert!((ratio - 1.0).abs() < 0.02, "mask ratio {ratio}");
        for i in 0..rot.mask.data.len() {
            if rot.mask.data[i] {
                assert!(rot.coords.data[i][0] < 1e29);
            }
        }
    }

    #[test]
    fn affine_preserves_reprojection() {
        use crate::geometry::project;
        let ds = toy_dataset(1, 64, 12);
        let s = ds.sample(0).unwrap();
        let out = warp_affine(&s, 0.4, 1.08, (2.0, -1.5));
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                if !out.mask.at(x, y) {
                    continue;
                }
                let c = out.coords.at(x, y);
                let p = crate::geometry::Pt3::new(c[0] as f64, c[1] as f64, c[2] as f64);
                let px = project(&p, &out.pose, &out.intrinsics).unwrap();
                let err = (px.x - (x as f64 + 0.5)).hypot(px.y - (y as f64 + 0.5));
                // Nearest-neighbor warp moves coords by up to ~a pixel.
                assert!(err < 2.0, "({x},{y}) err {err}");
                checked += 1;
            }
        }
        assert!(checked > 300);
    }
}
