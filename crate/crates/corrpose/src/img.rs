//! Dense 2D buffers (color, coordinates, depth, masks) and their on-disk
//! formats: 8-bit PNG for color and masks, raw little-endian f32 with a
//! JSON sidecar for coordinate and depth maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major H x W buffer of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Buffer2<[f32; 3]>;
pub type CoordMap = Buffer2<[f32; 3]>;
pub type ScalarImage = Buffer2<f32>;
pub type MaskImage = Buffer2<bool>;

impl<T: Copy> Buffer2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn same_shape<U>(&self, other: &Buffer2<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl MaskImage {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// Tight bounding box over set pixels as pixel-index ranges, inclusive.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// 1-pixel dilation (8-neighborhood).
    pub fn dilated(&self) -> MaskImage {
        let mut out = MaskImage::filled(self.width, self.height, false);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.at(x, y) {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                            out.set(nx as usize, ny as usize, true);
                        }
                    }
                }
            }
        }
        out
    }
}

impl RgbImage {
    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// half-integers). Clamps at the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = self.at(x0, y0)[c] * (1.0 - ax) + self.at(x1, y0)[c] * ax;
            let bot = self.at(x0, y1)[c] * (1.0 - ax) + self.at(x1, y1)[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    pub fn clip_unit(&mut self) {
        for px in self.data.iter_mut() {
            for c in px.iter_mut() {
                *c = c.clamp(0.0, 1.0);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// PNG

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.at(x, y);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let buf = image::open(path)?.into_rgb8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut out = RgbImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let p = buf.get_pixel(x as u32, y as u32);
            out.set(x, y, [from_u8(p[0]), from_u8(p[1]), from_u8(p[2])]);
        }
    }
    Ok(out)
}

pub fn save_mask_png(mask: &MaskImage, path: &Path) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            buf.put_pixel(x as u32, y as u32, image::Luma([if mask.at(x, y) { 255 } else { 0 }]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<MaskImage> {
    let buf = image::open(path)?.into_luma8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut out = MaskImage::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, buf.get_pixel(x as u32, y as u32)[0] >= 128);
        }
    }
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

// ---------------------------------------------------------------------------
// Raw f32 maps with sidecar

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
}

/// Writes `<path>` as raw little-endian f32 and `<path>.json` describing it.
pub fn save_raw_f32(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::invalid("raw map", "data length does not match shape"));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let sidecar = RawSidecar {
        height,
        width,
        channels,
        dtype: "f32le".to_string(),
    };
    let mut sp = path.as_os_str().to_owned();
    sp.push(".json");
    std::fs::write(sp, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_raw_f32(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut sp = path.as_os_str().to_owned();
    sp.push(".json");
    let sidecar: RawSidecar = serde_json::from_slice(&std::fs::read(sp)?)?;
    if sidecar.dtype != "f32le" {
        return Err(Error::Parse {
            what: path.display().to_string(),
            why: format!("unsupported dtype {}", sidecar.dtype),
        });
    }
    let bytes = std::fs::read(path)?;
    let expect = sidecar.width * sidecar.height * sidecar.channels * 4;
    if bytes.len() != expect {
        return Err(Error::Parse {
            what: path.display().to_string(),
            why: format!("expected {expect} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((sidecar.width, sidecar.height, sidecar.channels, data))
}

pub fn save_coord_map(map: &CoordMap, path: &Path) -> Result<()> {
    let flat: Vec<f32> = map.data.iter().flatten().copied().collect();
    save_raw_f32(path, map.width, map.height, 3, &flat)
}

pub fn load_coord_map(path: &Path) -> Result<CoordMap> {
    let (w, h, c, data) = load_raw_f32(path)?;
    if c != 3 {
        return Err(Error::Parse {
            what: path.display().to_string(),
            why: format!("expected 3 channels, found {c}"),
        });
    }
    let data = data.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
    Ok(CoordMap {
        width: w,
        height: h,
        data,
    })
}

pub fn save_depth_map(map: &ScalarImage, path: &Path) -> Result<()> {
    save_raw_f32(path, map.width, map.height, 1, &map.data)
}

pub fn load_depth_map(path: &Path) -> Result<ScalarImage> {
    let (w, h, c, data) = load_raw_f32(path)?;
    if c != 1 {
        return Err(Error::Parse {
            what: path.display().to_string(),
            why: format!("expected 1 channel, found {c}"),
        });
    }
    Ok(ScalarImage {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = std::env::temp_dir().join("corrpose-img-test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = RgbImage::filled(5, 4, [0.0; 3]);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = [(i as f32) / 20.0, 0.5, 1.0 - (i as f32) / 20.0];
        }
        let p = dir.join("a.png");
        save_rgb_png(&img, &p).unwrap();
        let back = load_rgb_png(&p).unwrap();
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn raw_roundtrip_exact() {
        let dir = std::env::temp_dir().join("corrpose-img-test");
        std::fs::create_dir_all(&dir).unwrap();
        let map = CoordMap {
            width: 3,
            height: 2,
            data: vec![[1.0, -2.5, 1e30]; 6],
        };
        let p = dir.join("c.f32");
        save_coord_map(&map, &p).unwrap();
        assert_eq!(load_coord_map(&p).unwrap(), map);
    }

    #[test]
    fn mask_bounds() {
        let mut m = MaskImage::filled(8, 8, false);
        m.set(2, 3, true);
        m.set(5, 6, true);
        assert_eq!(m.bounds(), Some((2, 3, 5, 6)));
        assert_eq!(MaskImage::filled(4, 4, false).bounds(), None);
    }
}
