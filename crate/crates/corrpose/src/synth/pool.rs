//! Background and occluder sources for cut-and-paste augmentation.
//!
//! Defaults to procedural content (multi-octave value-noise textures and
//! random polygon scatters) so the toolkit is self-contained; a directory
//! of user images can be supplied instead.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::img::{MaskImage, RgbImage};

#[derive(Debug, Clone)]
pub enum ImagePool {
    /// Procedurally generated textures and shapes.
    Procedural,
    /// User-supplied images, sampled by random crop.
    Directory(Vec<RgbImage>),
}

impl ImagePool {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut images = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        entries.sort();
        for p in entries {
            images.push(crate::img::load_rgb_png(&p)?);
        }
        if images.is_empty() {
            return Err(crate::error::Error::Config(format!(
                "no PNG images in {}",
                dir.display()
            )));
        }
        Ok(ImagePool::Directory(images))
    }

    /// A background image of the requested size.
    pub fn background(&self, width: usize, height: usize, rng: &mut ChaCha8Rng) -> RgbImage {
        match self {
            ImagePool::Procedural => {
                let mut img = value_noise_texture(width, height, rng);
                let count = 2 + (rng.random::<u32>() % 5) as usize;
                scatter_polygons(&mut img, rng, count);
                img
            }
            ImagePool::Directory(images) => {
                let src = &images[(rng.random::<u32>() as usize) % images.len()];
                random_crop_resize(src, width, height, rng)
            }
        }
    }

    /// An occluder cutout: texture plus blob mask, in its own bitmap.
    pub fn cutout(&self, rng: &mut ChaCha8Rng) -> (RgbImage, MaskImage) {
        let side = 64;
        let tex = match self {
            ImagePool::Procedural => value_noise_texture(side, side, rng),
            ImagePool::Directory(images) => {
                let src = &images[(rng.random::<u32>() as usize) % images.len()];
                random_crop_resize(src, side, side, rng)
            }
        };
        let mask = blob_mask(side, rng);
        (tex, mask)
    }
}

/// Three-octave bilinear value noise with a random two-color palette.
fn value_noise_texture(width: usize, height: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let ca = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let cb = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];

    let mut value = vec![0.0f32; width * height];
    let mut amp = 0.5f32;
    for octave in 0..3 {
        let cells = 2usize << octave;
        let grid: Vec<f32> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.random::<f32>())
            .collect();
        for y in 0..height {
            for x in 0..width {
                let gx = x as f32 / width as f32 * cells as f32;
                let gy = y as f32 / height as f32 * cells as f32;
                let (ix, iy) = (gx as usize, gy as usize);
                let (fx, fy) = (gx - ix as f32, gy - iy as f32);
                let g = |i: usize, j: usize| grid[j.min(cells) * (cells + 1) + i.min(cells)];
                let top = g(ix, iy) * (1.0 - fx) + g(ix + 1, iy) * fx;
                let bot = g(ix, iy + 1) * (1.0 - fx) + g(ix + 1, iy + 1) * fx;
                value[y * width + x] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
        amp *= 0.5;
    }

    let mut img = RgbImage::filled(width, height, [0.0; 3]);
    for (i, v) in value.iter().enumerate() {
        let t = v.clamp(0.0, 1.0);
        img.data[i] = [
            ca[0] * (1.0 - t) + cb[0] * t,
            ca[1] * (1.0 - t) + cb[1] * t,
            ca[2] * (1.0 - t) + cb[2] * t,
        ];
    }
    img
}

fn scatter_polygons(img: &mut RgbImage, rng: &mut ChaCha8Rng, count: usize) {
    for _ in 0..count {
        let color = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let cx = rng.random::<f64>() * img.width as f64;
        let cy = rng.random::<f64>() * img.height as f64;
        let r = (0.08 + 0.22 * rng.random::<f64>()) * img.width.max(img.height) as f64;
        let sides = 3 + (rng.random::<u32>() % 5) as usize;
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let verts: Vec<(f64, f64)> = (0..sides)
            .map(|i| {
                let a = phase + i as f64 / sides as f64 * std::f64::consts::TAU;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let x0 = verts.iter().map(|v| v.0).fold(f64::INFINITY, f64::min).max(0.0) as usize;
        let x1 = (verts.iter().map(|v| v.0).fold(0.0, f64::max).ceil() as usize).min(img.width);
        let y0 = verts.iter().map(|v| v.1).fold(f64::INFINITY, f64::min).max(0.0) as usize;
        let y1 = (verts.iter().map(|v| v.1).fold(0.0, f64::max).ceil() as usize).min(img.height);
        for y in y0..y1 {
            for x in x0..x1 {
                if point_in_convex(&verts, x as f64 + 0.5, y as f64 + 0.5) {
                    img.set(x, y, color);
                }
            }
        }
    }
}

fn point_in_convex(verts: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut sign = 0.0f64;
    for i in 0..verts.len() {
        let (ax, ay) = verts[i];
        let (bx, by) = verts[(i + 1) % verts.len()];
        let c = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        if c.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return false;
        }
    }
    true
}

/// Star-convex blob: polygon with random vertex radii around the bitmap
/// center.
fn blob_mask(side: usize, rng: &mut ChaCha8Rng) -> MaskImage {
    let n = 7 + (rng.random::<u32>() % 6) as usize;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let radii: Vec<f64> = (0..n).map(|_| 0.45 + 0.5 * rng.random::<f64>()).collect();
    let half = side as f64 / 2.0;
    let mut mask = MaskImage::filled(side, side, false);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 + 0.5 - half) / half;
            let dy = (y as f64 + 0.5 - half) / half;
            let r = dx.hypot(dy);
            let a = dy.atan2(dx);
            // Piecewise-linear radius over the polygon angles.
            let t = ((a - phase).rem_euclid(std::f64::consts::TAU)) / std::f64::consts::TAU * n as f64;
            let i = t as usize % n;
            let f = t - t.floor();
            let rim = radii[i] * (1.0 - f) + radii[(i + 1) % n] * f;
            if r <= rim {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

fn random_crop_resize(src: &RgbImage, width: usize, height: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let frac = 0.4 + 0.6 * rng.random::<f64>();
    let cw = ((src.width as f64 * frac) as usize).max(1);
    let ch = ((src.height as f64 * frac) as usize).max(1);
    let ox = (rng.random::<u32>() as usize) % (src.width - cw + 1);
    let oy = (rng.random::<u32>() as usize) % (src.height - ch + 1);
    let mut out = RgbImage::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let sx = ox as f64 + (x as f64 + 0.5) / width as f64 * cw as f64;
            let sy = oy as f64 + (y as f64 + 0.5) / height as f64 * ch as f64;
            out.set(x, y, src.sample_bilinear(sx, sy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_background_is_deterministic() {
        let pool = ImagePool::Procedural;
        let a = pool.background(32, 32, &mut crate::rng::stream(4, b"bg"));
        let b = pool.background(32, 32, &mut crate::rng::stream(4, b"bg"));
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn cutout_mask_is_substantial() {
        let pool = ImagePool::Procedural;
        for s in 0..5 {
            let (tex, mask) = pool.cutout(&mut crate::rng::stream(s, b"cut"));
            assert_eq!(tex.width, mask.width);
            let frac = mask.count() as f64 / (mask.width * mask.height) as f64;
            assert!(frac > 0.2 && frac < 0.95, "blob fraction {frac}");
        }
    }
}
