//! In-memory image buffers and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Label values used by semantic masks.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_BODY: u8 = 1;
pub const LABEL_HAIR: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

pub type GrayImage = Image<f64>;
pub type RgbImage = Image<[f64; 3]>;
pub type LabelMask = Image<u8>;

impl<T: Clone> Image<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> &T {
        &self.data[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: T) {
        let i = self.index(x, y);
        self.data[i] = v;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rotates 90° counter-clockwise on screen.
    pub fn rotated_ccw(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..w {
            for x in 0..h {
                // Output (x, y) comes from input (w-1-y, x).
                data.push(self.get(w - 1 - y, x).clone());
            }
        }
        Image { width: h, height: w, data }
    }
}

/// ITU-R BT.709 luma.
pub fn luma(rgb: &[f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

pub fn to_gray(img: &RgbImage) -> GrayImage {
    img.map(luma)
}

/// Box-filter downsampling by an integer factor.
pub fn downsample_rgb(img: &RgbImage, factor: u32) -> RgbImage {
    if factor <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = img.get(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out.set(x, y, acc.map(|a| a * norm));
        }
    }
    out
}

/// Label downsampling: a block is hair when hair covers at least half of
/// it, otherwise its most frequent remaining label.
pub fn downsample_mask(mask: &LabelMask, factor: u32) -> LabelMask {
    if factor <= 1 {
        return mask.clone();
    }
    let (w, h) = (mask.width / factor, mask.height / factor);
    let mut out = Image::filled(w, h, LABEL_BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let mut counts = [0u32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let l = *mask.get(x * factor + dx, y * factor + dy) as usize;
                    counts[l.min(2)] += 1;
                }
            }
            let label = if 2 * counts[2] >= factor * factor {
                LABEL_HAIR
            } else if counts[1] > counts[0] {
                LABEL_BODY
            } else {
                LABEL_BACKGROUND
            };
            out.set(x, y, label);
        }
    }
    out
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width, img.height, |x, y| {
        Rgb(img.get(x, y).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path)?;
    Ok(())
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width, img.height, |x, y| {
        Luma([(img.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path)?;
    Ok(())
}

/// Loads an 8- or 16-bit PNG as rgb in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.into_rgb16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0.map(|c| c as f64 / 65535.0)).collect();
    Ok(Image { width: w, height: h, data })
}

/// Masks are stored as raw labels {0, 1, 2} in an 8-bit gray PNG.
pub fn save_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width, mask.height, mask.data.clone()).expect("buffer size matches");
    buf.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<LabelMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw();
    if let Some(bad) = data.iter().find(|&&l| l > LABEL_HAIR) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            msg: format!("mask label {bad} outside {{0, 1, 2}}"),
        });
    }
    Ok(Image { width: w, height: h, data })
}

/// Hue wheel color for a line angle in `(0, π]`; black where `weight` is 0.
pub fn angle_color(angle: f64, weight: f64) -> [f64; 3] {
    let h = (angle / std::f64::consts::PI).rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let rgb = match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    rgb.map(|c| c * weight.clamp(0.0, 1.0))
}
