use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned hair bounding box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HairBBox {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl HairBBox {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::contract("bounding box min must be below max on every axis"));
        }
        Ok(Self { min, max })
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3<f64>>, margin: f64) -> Option<Self> {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if !lo.x.is_finite() {
            return None;
        }
        let m = Vector3::repeat(margin);
        Self::new(lo - m, hi + m).ok()
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Slab clip of the ray `origin + t·dir`, `t ≥ 0`. Returns `None` on a
    /// miss; `t_near` is clamped to 0 for origins inside the box.
    pub fn clip_ray(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    pub fn to_text(&self) -> String {
        format!(
            "min {:?} {:?} {:?}\nmax {:?} {:?} {:?}\n",
            self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z
        )
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut min = None;
        let mut max = None;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let key = match it.next() {
                Some(k) => k,
                None => continue,
            };
            let vals: std::result::Result<Vec<f64>, _> = it.map(str::parse).collect();
            let vals = vals.map_err(|e| format!("bad number in '{line}': {e}"))?;
            if vals.len() != 3 {
                return Err(format!("expected 3 values in '{line}'"));
            }
            let p = Point3::new(vals[0], vals[1], vals[2]);
            match key {
                "min" => min = Some(p),
                "max" => max = Some(p),
                other => return Err(format!("unknown key '{other}'")),
            }
        }
        let (min, max) = (min.ok_or("missing 'min'")?, max.ok_or("missing 'max'")?);
        Self::new(min, max).map_err(|e| e.to_string())
    }
}

/// Free-function form of [`HairBBox::clip_ray`].
pub fn ray_box_clip(origin: &Point3<f64>, dir: &Vector3<f64>, bbox: &HairBBox) -> Option<(f64, f64)> {
    bbox.clip_ray(origin, dir)
}
