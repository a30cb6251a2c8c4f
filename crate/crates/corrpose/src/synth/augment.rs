//! Online training-image augmentation: cut-and-paste occlusion and
//! background replacement, color jitter, white-balance gains, and in-plane
//! affine warps that keep image, coordinate map, mask, pose and intrinsics
//! consistent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ImagePool, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::{rotation_exp, Intrinsics, Pose, Vec3};
use crate::img::{MaskImage, RgbImage};
use crate::raster::COORD_SENTINEL;

// ---------------------------------------------------------------------------
// Cut-and-paste

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CutPasteConfig {
    /// Fraction of object pixels the pasted occluder must cover.
    pub occlusion_range: (f64, f64),
    /// Probability of replacing the background with uniform noise instead
    /// of an image crop.
    pub background_noise_prob: f64,
    pub max_retries: usize,
}

impl Default for CutPasteConfig {
    fn default() -> Self {
        Self {
            occlusion_range: (0.20, 0.70),
            background_noise_prob: 0.5,
            max_retries: 50,
        }
    }
}

/// Replaces the background and pastes an occluder cutout so that the
/// occluded fraction of object pixels lands inside `cfg.occlusion_range`.
/// The output mask keeps only visible object pixels; occluded coordinates
/// are reset to the sentinel.
pub fn cut_and_paste(
    sample: &SceneSample,
    occluders: &ImagePool,
    backgrounds: &ImagePool,
    cfg: &CutPasteConfig,
    seed: u64,
) -> Result<SceneSample> {
    let orig_count = sample.mask.count();
    if orig_count == 0 {
        return Err(Error::EmptyMask);
    }
    let (w, h) = (sample.color.width, sample.color.height);
    let mut rng = crate::rng::stream(seed, b"cut-and-paste");

    let mut out = sample.clone();

    // Background: noise or image crop, with equal probability by default.
    let use_noise = rng.random::<f64>() < cfg.background_noise_prob;
    if use_noise {
        for i in 0..out.color.data.len() {
            if !out.mask.data[i] {
                out.color.data[i] = [rng.random(), rng.random(), rng.random()];
            }
        }
    } else {
        let bg = backgrounds.background(w, h, &mut rng);
        for i in 0..out.color.data.len() {
            if !out.mask.data[i] {
                out.color.data[i] = bg.data[i];
            }
        }
    }

    // Occluder: binary-search the paste scale until the occluded fraction
    // hits the target; retry with a fresh cutout/position if the shape
    // cannot reach it.
    let (lo, hi) = cfg.occlusion_range;
    let target = lo + rng.random::<f64>() * (hi - lo);
    let (bx0, by0, bx1, by1) = sample.mask.bounds().expect("checked non-empty");
    let base = ((bx1 - bx0 + 1).max(by1 - by0 + 1)) as f64;

    for _ in 0..cfg.max_retries {
        let (tex, cmask) = occluders.cutout(&mut rng);
        let cx = bx0 as f64 + rng.random::<f64>() * (bx1 - bx0 + 1) as f64;
        let cy = by0 as f64 + rng.random::<f64>() * (by1 - by0 + 1) as f64;

        let occluded = |scale: f64| -> usize {
            let mut n = 0;
            for y in 0..h {
                for x in 0..w {
                    if sample.mask.at(x, y)
                        && cutout_hit(&cmask, x as f64 + 0.5, y as f64 + 0.5, cx, cy, scale * base)
                    {
                        n += 1;
                    }
                }
            }
            n
        };

        let (mut s_lo, mut s_hi) = (0.02, 4.0);
        if (occluded(s_hi) as f64) < lo * orig_count as f64 {
            continue; // cannot reach the range from this position
        }
        for _ in 0..24 {
            let mid = 0.5 * (s_lo + s_hi);
            if (occluded(mid) as f64) < target * orig_count as f64 {
                s_lo = mid;
            } else {
                s_hi = mid;
            }
        }
        // Pixel quantization can push the converged fraction just past a
        // range boundary; the bracket's other end then sits just inside.
        let in_range = |s: f64| {
            let f = occluded(s) as f64 / orig_count as f64;
            (lo..=hi).contains(&f).then_some(s)
        };
        let Some(scale) = in_range(s_hi).or_else(|| in_range(s_lo)) else {
            continue;
        };

        // Paste.
        let half = 0.5 * scale * base;
        let px0 = ((cx - half).floor().max(0.0)) as usize;
        let py0 = ((cy - half).floor().max(0.0)) as usize;
        let px1 = ((cx + half).ceil() as i64).clamp(0, w as i64) as usize;
        let py1 = ((cy + half).ceil() as i64).clamp(0, h as i64) as usize;
        for y in py0..py1 {
            for x in px0..px1 {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if !cutout_hit(&cmask, fx, fy, cx, cy, scale * base) {
                    continue;
                }
                let u = ((fx - cx) / (scale * base) + 0.5) * tex.width as f64;
                let v = ((fy - cy) / (scale * base) + 0.5) * tex.height as f64;
                let idx = out.color.idx(x, y);
                out.color.data[idx] = tex.sample_bilinear(u, v);
                if out.mask.data[idx] {
                    out.mask.data[idx] = false;
                    out.coords.data[idx] = [COORD_SENTINEL; 3];
                }
            }
        }
        out.visible_fraction = sample.visible_fraction * out.mask.count() as f64 / orig_count as f64;
        return Ok(out);
    }
    Err(Error::PlacementFailure(cfg.max_retries))
}

/// Whether image point `(px, py)` falls on the cut-out mask pasted with
/// its bitmap center at `(cx, cy)` and covering `extent` pixels.
fn cutout_hit(cmask: &MaskImage, px: f64, py: f64, cx: f64, cy: f64, extent: f64) -> bool {
    let u = ((px - cx) / extent + 0.5) * cmask.width as f64;
    let v = ((py - cy) / extent + 0.5) * cmask.height as f64;
    if u < 0.0 || v < 0.0 {
        return false;
    }
    let (ui, vi) = (u as usize, v as usize);
    ui < cmask.width && vi < cmask.height && cmask.at(ui, vi)
}

// ---------------------------------------------------------------------------
// Color augmentation

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ColorAugmentConfig {
    /// Max additive brightness shift.
    pub brightness: f64,
    /// Multiplicative contrast range about mid-gray.
    pub contrast: (f64, f64),
    /// Max hue rotation about the gray axis, degrees.
    pub hue_deg: f64,
    /// Max Gaussian blur sigma, pixels.
    pub blur_sigma: f64,
    /// Max additive Gaussian noise sigma.
    pub noise_sigma: f64,
}

impl Default for ColorAugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.12,
            contrast: (0.75, 1.3),
            hue_deg: 25.0,
            blur_sigma: 1.0,
            noise_sigma: 0.02,
        }
    }
}

impl ColorAugmentConfig {
    /// All magnitudes zero: the augmentation becomes the identity.
    pub fn zero() -> Self {
        Self {
            brightness: 0.0,
            contrast: (1.0, 1.0),
            hue_deg: 0.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
        }
    }
}

pub fn color_augment(image: &RgbImage, cfg: &ColorAugmentConfig, seed: u64) -> RgbImage {
    let mut rng = crate::rng::stream(seed, b"color-augment");
    let delta = (rng.random::<f64>() * 2.0 - 1.0) * cfg.brightness;
    let contrast = cfg.contrast.0 + rng.random::<f64>() * (cfg.contrast.1 - cfg.contrast.0);
    let hue = (rng.random::<f64>() * 2.0 - 1.0) * cfg.hue_deg.to_radians();
    let sigma = rng.random::<f64>() * cfg.blur_sigma;
    let noise = rng.random::<f64>() * cfg.noise_sigma;

    let axis = Vec3::new(1.0, 1.0, 1.0).normalize();
    let hrot = rotation_exp(&(axis * hue));

    let mut out = image.clone();
    for px in out.data.iter_mut() {
        let v = Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64);
        let v = (v.add_scalar(-0.5)) * contrast;
        let v = hrot * v;
        let v = v.add_scalar(0.5 + delta);
        *px = [v.x as f32, v.y as f32, v.z as f32];
    }
    if sigma > 1e-3 {
        out = gaussian_blur(&out, sigma);
    }
    if noise > 0.0 {
        for px in out.data.iter_mut() {
            for c in px.iter_mut() {
                *c += (noise * normal_sample(&mut rng)) as f32;
            }
        }
    }
    out.clip_unit();
    out
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = rng.random::<f64>().max(1e-12);
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let radius = (2.5 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }

    let (w, h) = (img.width, img.height);
    let mut tmp = RgbImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, kw) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                let p = img.at(sx, y);
                for c in 0..3 {
                    acc[c] += kw * p[c] as f64;
                }
            }
            tmp.set(x, y, [acc[0] as f32, acc[1] as f32, acc[2] as f32]);
        }
    }
    let mut out = RgbImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, kw) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                let p = tmp.at(x, sy);
                for c in 0..3 {
                    acc[c] += kw * p[c] as f64;
                }
            }
            out.set(x, y, [acc[0] as f32, acc[1] as f32, acc[2] as f32]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// White balance

/// Documented illuminant gain table, warm to cool. Gains multiply linear
/// channel values.
pub const ILLUMINANT_GAINS: [[f32; 3]; 8] = [
    [1.35, 1.00, 0.62], // incandescent
    [1.25, 1.00, 0.72], // halogen
    [1.12, 1.00, 0.84], // warm fluorescent
    [1.04, 1.00, 0.94], // morning sun
    [1.00, 1.00, 1.00], // reference daylight
    [0.95, 1.00, 1.08], // overcast
    [0.88, 1.00, 1.18], // shade
    [0.80, 1.00, 1.30], // blue sky
];

/// Per-channel linear gains, clipped to `[0, 1]`.
pub fn apply_white_balance(image: &RgbImage, gains: [f32; 3]) -> RgbImage {
    let mut out = image.clone();
    for px in out.data.iter_mut() {
        for c in 0..3 {
            px[c] = (px[c] * gains[c]).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn white_balance_augment(image: &RgbImage, seed: u64) -> RgbImage {
    let mut rng = crate::rng::stream(seed, b"white-balance");
    let gains = ILLUMINANT_GAINS[(rng.random::<u32>() as usize) % ILLUMINANT_GAINS.len()];
    apply_white_balance(image, gains)
}

// ---------------------------------------------------------------------------
// In-plane affine

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AffineAugmentConfig {
    pub max_rot_deg: f64,
    pub scale_range: (f64, f64),
    /// Max shift as a fraction of the image side.
    pub max_shift_frac: f64,
}

impl Default for AffineAugmentConfig {
    fn default() -> Self {
        Self {
            max_rot_deg: 30.0,
            scale_range: (0.85, 1.15),
            max_shift_frac: 0.06,
        }
    }
}

impl AffineAugmentConfig {
    pub fn zero() -> Self {
        Self {
            max_rot_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_shift_frac: 0.0,
        }
    }
}

/// In-plane rotation/scale/translation applied consistently to color,
/// coordinates and mask.
///
/// The pixel map is `p' = s R(theta) (p - m) + m + d` about the image
/// center `m`. Re-expressed about the principal point this is a pure
/// camera roll plus an intrinsics change (the crop intrinsics are square,
/// `fx = fy`), so pose and intrinsics are updated in closed form and
/// reprojection consistency is preserved exactly.
pub fn affine_augment(sample: &SceneSample, cfg: &AffineAugmentConfig, seed: u64) -> SceneSample {
    let mut rng = crate::rng::stream(seed, b"affine-augment");
    let theta = (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_rot_deg.to_radians();
    let s = cfg.scale_range.0 + rng.random::<f64>() * (cfg.scale_range.1 - cfg.scale_range.0);
    let side = sample.color.width.max(sample.color.height) as f64;
    let dx = (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_shift_frac * side;
    let dy = (rng.random::<f64>() * 2.0 - 1.0) * cfg.max_shift_frac * side;
    warp_affine(sample, theta, s, (dx, dy))
}

pub fn warp_affine(sample: &SceneSample, theta: f64, scale: f64, shift: (f64, f64)) -> SceneSample {
    let k = &sample.intrinsics;
    let (w, h) = (sample.color.width, sample.color.height);
    let (ct, st) = (theta.cos(), theta.sin());
    let (mx, my) = (w as f64 / 2.0, h as f64 / 2.0);

    let mut out = sample.clone();
    out.color = RgbImage::filled(w, h, [0.0; 3]);
    out.coords = crate::img::CoordMap::filled(w, h, [COORD_SENTINEL; 3]);
    out.mask = MaskImage::filled(w, h, false);

    // Inverse map: p = R(-theta) ((p' - m - d) / s) + m.
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5 - mx - shift.0;
            let py = y as f64 + 0.5 - my - shift.1;
            let qx = (ct * px + st * py) / scale + mx;
            let qy = (-st * px + ct * py) / scale + my;
            if qx < 0.0 || qy < 0.0 || qx >= w as f64 || qy >= h as f64 {
                continue;
            }
            out.color.set(x, y, sample.color.sample_bilinear(qx, qy));
            let (nx, ny) = (qx as usize, qy as usize);
            if sample.mask.at(nx, ny) {
                out.mask.set(x, y, true);
                out.coords.set(x, y, sample.coords.at(nx, ny));
            }
        }
    }

    // About the principal point c the same map reads
    // p' = s R (p - c) + c + d_eff with d_eff = s R (c - m) + m - c + d.
    let roll = rotation_exp(&Vec3::new(0.0, 0.0, theta));
    out.pose = Pose::from_parts(roll * sample.pose.rotation, roll * sample.pose.translation);
    let (ex, ey) = (k.cx - mx, k.cy - my);
    let d_eff = (
        scale * (ct * ex - st * ey) - ex + shift.0,
        scale * (st * ex + ct * ey) - ey + shift.1,
    );
    out.intrinsics = Intrinsics::new(
        k.fx * scale,
        k.fy * scale,
        k.cx + d_eff.0,
        k.cy + d_eff.1,
        k.width,
        k.height,
    )
    .expect("scaled intrinsics stay valid");
    out.visible_fraction = sample.visible_fraction
        * if sample.mask.count() > 0 {
            out.mask.count() as f64 / sample.mask.count() as f64
        } else {
            1.0
        };
    out
}
