use serde::{Deserialize, Serialize};

use super::angles::ORIENTATION_BINS;
use crate::error::{Error, Result};

const NORMALIZED_TOL: f64 = 1e-6;

/// Discretized distribution over polar pairs `(θ, φ)`; bin `(i, j)` is
/// stored at `i * bins + j` with `i` the θ bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationHistogram3D {
    bins: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl OrientationHistogram3D {
    pub fn zeros(bins: usize) -> Self {
        Self {
            bins,
            values: vec![0.0; bins * bins],
            normalized: false,
        }
    }

    pub fn from_values(bins: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != bins * bins {
            return Err(Error::contract(format!(
                "expected {} histogram values, got {}",
                bins * bins,
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::contract("histogram bins must be nonnegative"));
        }
        Ok(Self {
            bins,
            values,
            normalized: false,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        self.normalized = false;
        &mut self.values
    }

    pub fn get(&self, theta_bin: usize, phi_bin: usize) -> f64 {
        self.values[theta_bin * self.bins + phi_bin]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalize(&mut self) -> Result<()> {
        let s = self.sum();
        if !(s > 0.0) {
            return Err(Error::contract("cannot normalize an all-zero histogram"));
        }
        self.values.iter_mut().for_each(|v| *v /= s);
        self.normalized = true;
        Ok(())
    }

    pub(crate) fn mark_normalized(&mut self) {
        self.normalized = true;
    }

    pub fn argmax(&self) -> (usize, usize) {
        let k = argmax(&self.values);
        (k / self.bins, k % self.bins)
    }

    /// Strict local maxima over the periodic 8-neighbourhood whose value
    /// exceeds `min_fraction` of the global maximum.
    pub fn local_maxima(&self, min_fraction: f64) -> Vec<(usize, usize)> {
        let b = self.bins as isize;
        let peak = self.values.iter().cloned().fold(0.0, f64::max);
        let mut out = Vec::new();
        for i in 0..b {
            for j in 0..b {
                let v = self.values[(i * b + j) as usize];
                if v <= min_fraction * peak || v <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'nb: for di in -1..=1isize {
                    for dj in -1..=1isize {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let ii = (i + di).rem_euclid(b);
                        let jj = (j + dj).rem_euclid(b);
                        if self.values[(ii * b + jj) as usize] >= v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    out.push((i as usize, j as usize));
                }
            }
        }
        out
    }
}

/// Distribution over image-plane line angles `η ∈ (0, π]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationHistogram2D {
    values: Vec<f64>,
    normalized: bool,
}

impl OrientationHistogram2D {
    pub fn zeros(bins: usize) -> Self {
        Self {
            values: vec![0.0; bins],
            normalized: false,
        }
    }

    pub fn uniform(bins: usize) -> Self {
        Self {
            values: vec![1.0 / bins as f64; bins],
            normalized: true,
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::contract("histogram bins must be nonnegative"));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// One-hot distribution at a 0-based bin.
    pub fn delta(bins: usize, bin: usize) -> Self {
        let mut values = vec![0.0; bins];
        values[bin] = 1.0;
        Self {
            values,
            normalized: true,
        }
    }

    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalize(&mut self) -> Result<()> {
        let s = self.sum();
        if !(s > 0.0) {
            return Err(Error::contract("cannot normalize an all-zero histogram"));
        }
        self.values.iter_mut().for_each(|v| *v /= s);
        self.normalized = true;
        Ok(())
    }

    /// Verifies the normalization flag against the actual mass.
    pub fn check_normalized(&self) -> Result<()> {
        if !self.normalized || (self.sum() - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::contract(format!(
                "2D orientation histogram is not normalized (sum {})",
                self.sum()
            )));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    /// Circular local maxima above `min_fraction` of the global maximum,
    /// plateaus reported once at their first bin.
    pub fn local_maxima(&self, min_fraction: f64) -> Vec<usize> {
        let n = self.values.len();
        let peak = self.values.iter().cloned().fold(0.0, f64::max);
        (0..n)
            .filter(|&k| {
                let v = self.values[k];
                let prev = self.values[(k + n - 1) % n];
                let next = self.values[(k + 1) % n];
                v > min_fraction * peak && v > 0.0 && v > prev && v >= next
            })
            .collect()
    }
}

/// Circular distance between two bins.
pub fn circular_bin_distance(a: usize, b: usize, bins: usize) -> usize {
    let d = a.abs_diff(b) % bins;
    d.min(bins - d)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

pub const DEFAULT_BINS: usize = ORIENTATION_BINS;
