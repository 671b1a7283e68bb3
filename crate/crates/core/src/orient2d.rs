//! Per-pixel 2D orientation distributions from a bank of oriented Gabor
//! filters.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::angles::{angle_bin, bin_width};
use crate::geom::OrientationHistogram2D;
use crate::raster::{angle_color, GrayImage, LabelMask, RgbImage, LABEL_HAIR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub radius: usize,
    pub wavelength: f64,
    /// Envelope standard deviation across the line.
    pub sigma: f64,
    /// Envelope ratio across/along the line.
    pub aspect: f64,
    pub bins: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            radius: 8,
            wavelength: 4.0,
            sigma: 2.0,
            aspect: 0.25,
            bins: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FilterBank {
    pub params: FilterParams,
    /// Kernel `k` (0-based) detects lines at angle `(k+1)π/B`.
    pub kernels: Vec<Vec<f64>>,
    offsets: Vec<(i32, i32)>,
}

/// Even Gabor response to a line through the origin at image angle `eta`.
fn gabor(x: f64, y: f64, eta: f64, p: &FilterParams) -> f64 {
    // Line direction on screen is (cos η, −sin η) with y down.
    let (s, c) = eta.sin_cos();
    let along = x * c - y * s;
    let across = x * s + y * c;
    let env = (-(across * across + (p.aspect * along).powi(2)) / (2.0 * p.sigma * p.sigma)).exp();
    env * (2.0 * PI * across / p.wavelength).cos()
}

impl FilterBank {
    pub fn new(params: FilterParams) -> Self {
        let r = params.radius as i32;
        let offsets: Vec<(i32, i32)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let kernels = (0..params.bins)
            .map(|k| {
                let eta = (k + 1) as f64 * bin_width(params.bins);
                let mut w: Vec<f64> = offsets
                    .iter()
                    .map(|&(dx, dy)| gabor(dx as f64, dy as f64, eta, &params))
                    .collect();
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                w.iter_mut().for_each(|v| *v -= mean);
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                w.iter_mut().for_each(|v| *v /= norm);
                w
            })
            .collect();
        Self {
            params,
            kernels,
            offsets,
        }
    }

    pub fn bins(&self) -> usize {
        self.params.bins
    }

    /// Kernel `k` laid out on the full `(2r+1)²` square, zero outside the
    /// circular support.
    pub fn dense_kernel(&self, k: usize) -> Vec<f64> {
        let r = self.params.radius as i32;
        let side = (2 * r + 1) as usize;
        let mut out = vec![0.0; side * side];
        for (&(dx, dy), &w) in self.offsets.iter().zip(&self.kernels[k]) {
            out[((dy + r) as usize) * side + (dx + r) as usize] = w;
        }
        out
    }

    /// Signed filter responses at one pixel, clamp-to-edge borders.
    pub fn responses_at(&self, img: &GrayImage, x: u32, y: u32, out: &mut [f64]) {
        let (w, h) = (img.width as i32, img.height as i32);
        let patch: Vec<f64> = self
            .offsets
            .iter()
            .map(|&(dx, dy)| {
                let px = (x as i32 + dx).clamp(0, w - 1) as u32;
                let py = (y as i32 + dy).clamp(0, h - 1) as u32;
                *img.get(px, py)
            })
            .collect();
        for (o, k) in out.iter_mut().zip(&self.kernels) {
            *o = k.iter().zip(&patch).map(|(a, b)| a * b).sum();
        }
    }
}

pub fn build_filter_bank(radius: usize, wavelength: f64, aspect: f64) -> FilterBank {
    FilterBank::new(FilterParams {
        radius,
        wavelength,
        aspect,
        ..FilterParams::default()
    })
}

/// Normalized per-pixel distributions, stored only for masked pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationMap {
    pub width: u32,
    pub height: u32,
    pub bins: usize,
    /// Per pixel: slot into `hists`, or `u32::MAX` when unmasked.
    slots: Vec<u32>,
    hists: Vec<f32>,
    confidence: Vec<f32>,
}

const NO_SLOT: u32 = u32::MAX;

/// Raw responses below this are treated as no signal.
const SIGNAL_FLOOR: f64 = 1e-6;

impl OrientationMap {
    pub fn empty(width: u32, height: u32, bins: usize) -> Self {
        Self {
            width,
            height,
            bins,
            slots: vec![NO_SLOT; (width * height) as usize],
            hists: Vec::new(),
            confidence: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    pub fn masked_pixels(&self) -> usize {
        self.confidence.len()
    }

    /// Stored distribution at a masked pixel.
    pub fn values(&self, x: u32, y: u32) -> Option<&[f32]> {
        let s = self.slots[(y * self.width + x) as usize];
        (s != NO_SLOT).then(|| &self.hists[s as usize * self.bins..(s as usize + 1) * self.bins])
    }

    /// Distribution at any pixel; uniform outside the mask.
    pub fn histogram(&self, x: u32, y: u32) -> OrientationHistogram2D {
        match self.values(x, y) {
            Some(v) => {
                let mut h = OrientationHistogram2D::from_values(v.iter().map(|&a| a as f64).collect())
                    .expect("stored histograms are valid");
                h.normalize().expect("stored histograms have mass");
                h
            }
            None => OrientationHistogram2D::uniform(self.bins),
        }
    }

    /// Stores a distribution at `(x, y)`, normalizing it. Panics when
    /// `values` has the wrong length or no mass.
    pub fn set_histogram(&mut self, x: u32, y: u32, values: &[f32], confidence: f32) {
        assert_eq!(values.len(), self.bins, "histogram length");
        let z: f32 = values.iter().sum();
        assert!(z > 0.0, "histogram has no mass");
        let i = (y * self.width + x) as usize;
        let slot = match self.slots[i] {
            NO_SLOT => {
                let s = self.confidence.len();
                self.slots[i] = s as u32;
                self.confidence.push(0.0);
                self.hists.extend(std::iter::repeat(0.0).take(self.bins));
                s
            }
            s => s as usize,
        };
        self.confidence[slot] = confidence;
        for (d, v) in self.hists[slot * self.bins..(slot + 1) * self.bins].iter_mut().zip(values) {
            *d = v / z;
        }
    }

    pub fn confidence(&self, x: u32, y: u32) -> f64 {
        let s = self.slots[(y * self.width + x) as usize];
        if s == NO_SLOT {
            0.0
        } else {
            self.confidence[s as usize] as f64
        }
    }

    /// Argmax angle per pixel as a hue image, brightness by confidence.
    pub fn angle_image(&self) -> RgbImage {
        let maxc = self.confidence.iter().cloned().fold(0.0f32, f32::max).max(1e-12) as f64;
        let mut img = RgbImage::filled(self.width, self.height, [0.0; 3]);
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(v) = self.values(x, y) {
                    let k = v
                        .iter()
                        .enumerate()
                        .fold((0, f32::MIN), |b, (i, &a)| if a > b.1 { (i, a) } else { b })
                        .0;
                    let eta = (k as f64 + 0.5) * bin_width(self.bins);
                    img.set(x, y, angle_color(eta, (self.confidence(x, y) / maxc).sqrt()));
                }
            }
        }
        img
    }

    /// Binary serialization: magic "ORI2", dims, then per pixel a flag and
    /// for masked pixels confidence plus bins as f32 LE.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ORI2");
        for v in [self.width, self.height, self.bins as u32, self.masked_pixels() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (i, &s) in self.slots.iter().enumerate() {
            if s != NO_SLOT {
                out.extend_from_slice(&(i as u32).to_le_bytes());
                out.extend_from_slice(&self.confidence[s as usize].to_le_bytes());
                for v in &self.hists[s as usize * self.bins..(s as usize + 1) * self.bins] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(data: &[u8]) -> crate::Result<Self> {
        let mut r = crate::geom::strand::ByteReader::new(data, "ORI2");
        r.magic(b"ORI2")?;
        let (w, h, bins, n) = (r.u32()?, r.u32()?, r.u32()? as usize, r.u32()? as usize);
        let mut map = OrientationMap::empty(w, h, bins);
        for slot in 0..n {
            let i = r.u32()? as usize;
            if i >= map.slots.len() {
                return Err(crate::Error::format("ORI2", "pixel index out of range"));
            }
            map.slots[i] = slot as u32;
            map.confidence.push(r.f32()?);
            for _ in 0..bins {
                map.hists.push(r.f32()?);
            }
        }
        r.finish()?;
        Ok(map)
    }
}

/// Turns raw magnitudes into a distribution: subtract the median, clamp at
/// zero and normalize. Returns `None` when there is no signal.
pub fn normalize_responses(raw: &mut [f64]) -> Option<f64> {
    let conf = raw.iter().cloned().fold(0.0, f64::max);
    if conf < SIGNAL_FLOOR {
        return None;
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = 0.5 * (sorted[(n - 1) / 2] + sorted[n / 2]);
    raw.iter_mut().for_each(|v| *v = (*v - median).max(0.0));
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return None;
    }
    raw.iter_mut().for_each(|v| *v /= sum);
    Some(conf)
}

/// Orientation distribution at every hair pixel of `mask`.
pub fn estimate_orientation_map(img: &GrayImage, bank: &FilterBank, mask: &LabelMask) -> crate::Result<OrientationMap> {
    if !img.same_size(mask) {
        return Err(crate::Error::contract("image and mask sizes differ"));
    }
    let bins = bank.bins();
    let mut map = OrientationMap::empty(img.width, img.height, bins);
    let pixels: Vec<u32> = (0..img.width * img.height)
        .filter(|&i| mask.data[i as usize] == LABEL_HAIR)
        .collect();
    if pixels.is_empty() {
        log::warn!("orientation estimation: mask has no hair pixels");
        return Ok(map);
    }
    let results: Vec<(Vec<f64>, f64)> = pixels
        .par_iter()
        .map(|&i| {
            let mut raw = vec![0.0; bins];
            bank.responses_at(img, i % img.width, i / img.width, &mut raw);
            raw.iter_mut().for_each(|v| *v = v.abs());
            match normalize_responses(&mut raw) {
                Some(c) => (raw, c),
                None => (vec![1.0 / bins as f64; bins], 0.0),
            }
        })
        .collect();
    for (slot, (&i, (h, c))) in pixels.iter().zip(results).enumerate() {
        map.slots[i as usize] = slot as u32;
        map.confidence.push(c as f32);
        map.hists.extend(h.iter().map(|&v| v as f32));
    }
    Ok(map)
}

/// 0-based bin of a line angle, for comparing peaks against ground truth.
pub fn angle_to_bin(eta: f64, bins: usize) -> usize {
    angle_bin(eta, bins)
}
