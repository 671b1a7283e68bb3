//! Periodic orientation kernel over the (θ, φ) bin grid.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geom::angles::bin_center;
use crate::geom::OrientationHistogram3D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    pub beta: f64,
    pub delta: f64,
    pub bins: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            beta: (64.0 / PI).powi(2),
            delta: 0.01,
            bins: 64,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.beta > 0.0 && self.delta > 0.0 && self.bins >= 2) {
            return Err(crate::Error::contract("kernel needs beta > 0, delta > 0 and at least two bins"));
        }
        Ok(())
    }
}

/// Normalizer of one expanded kernel and its angle derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KernelMass {
    pub sum: f64,
    pub d_theta: f64,
    pub d_phi: f64,
}

/// Scalar kernel value before normalization at one bin.
pub fn raw_kernel_value(p: &KernelParams, theta: f64, phi: f64, center: (f64, f64)) -> f64 {
    let mut v = 0.0;
    for i in [-1.0, 0.0, 1.0] {
        for j in [-1.0, 0.0, 1.0] {
            let a = theta - center.0 + i * PI;
            let b = phi - center.1 + j * PI;
            v += 1.0 / (p.beta * (a * a + b * b) + p.delta);
        }
    }
    v
}

/// Unnormalized value and its derivatives with respect to the center
/// angles, at a single bin.
pub fn raw_kernel_with_grad(p: &KernelParams, theta: f64, phi: f64, center: (f64, f64)) -> (f64, f64, f64) {
    let (mut v, mut dt, mut dp) = (0.0, 0.0, 0.0);
    for i in [-1.0, 0.0, 1.0] {
        for j in [-1.0, 0.0, 1.0] {
            let a = theta - center.0 + i * PI;
            let b = phi - center.1 + j * PI;
            let r = 1.0 / (p.beta * (a * a + b * b) + p.delta);
            let r2 = 2.0 * p.beta * r * r;
            v += r;
            dt += r2 * a;
            dp += r2 * b;
        }
    }
    (v, dt, dp)
}

/// Precomputed bin centers for fused expansion.
#[derive(Clone, Debug)]
pub struct OrientationKernel {
    pub params: KernelParams,
    centers: Vec<f64>,
}

impl OrientationKernel {
    pub fn new(params: KernelParams) -> Self {
        let centers = (0..params.bins).map(|i| bin_center(i, params.bins)).collect();
        Self { params, centers }
    }

    pub fn bins(&self) -> usize {
        self.params.bins
    }

    pub fn bin_angle(&self, i: usize) -> f64 {
        self.centers[i]
    }

    /// Offsets of every bin center to the three periodic images of `c`,
    /// laid out `[bin * 3 + image]`: β-scaled squares and raw values.
    fn offsets(&self, c: f64, sq: &mut Vec<f64>, raw: &mut Vec<f64>) {
        sq.clear();
        raw.clear();
        for &x in &self.centers {
            for s in [-PI, 0.0, PI] {
                let a = x - c + s;
                sq.push(self.params.beta * a * a);
                raw.push(a);
            }
        }
    }

    /// Adds `weight * h` to `buf` (row-major θ then φ) where `h` is the
    /// normalized kernel at `center`. Returns the normalizer; its angle
    /// derivatives are filled only when `with_grad` is set.
    pub fn accumulate(
        &self,
        center: (f64, f64),
        weight: f64,
        buf: &mut [f64],
        scratch: &mut KernelScratch,
        with_grad: bool,
    ) -> KernelMass {
        let n = self.bins();
        debug_assert_eq!(buf.len(), n * n);
        let delta = self.params.delta;
        self.offsets(center.0, &mut scratch.a, &mut scratch.da);
        self.offsets(center.1, &mut scratch.b, &mut scratch.db);
        let row = &mut scratch.row;
        row.resize(n * n, 0.0);
        let (mut sum, mut gt, mut gp) = (0.0, 0.0, 0.0);
        for ta in 0..n {
            let a = &scratch.a[ta * 3..ta * 3 + 3];
            let da = &scratch.da[ta * 3..ta * 3 + 3];
            for pb in 0..n {
                let b = &scratch.b[pb * 3..pb * 3 + 3];
                let mut v = 0.0;
                if with_grad {
                    let db = &scratch.db[pb * 3..pb * 3 + 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            let r = 1.0 / (a[i] + b[j] + delta);
                            let r2 = r * r;
                            v += r;
                            gt += r2 * da[i];
                            gp += r2 * db[j];
                        }
                    }
                } else {
                    for &ai in a {
                        v += 1.0 / (ai + b[0] + delta) + 1.0 / (ai + b[1] + delta) + 1.0 / (ai + b[2] + delta);
                    }
                }
                row[ta * n + pb] = v;
                sum += v;
            }
        }
        let scale = weight / sum;
        if scale != 0.0 {
            for (o, v) in buf.iter_mut().zip(row.iter()) {
                *o += scale * v;
            }
        }
        let two_beta = 2.0 * self.params.beta;
        KernelMass {
            sum,
            d_theta: two_beta * gt,
            d_phi: two_beta * gp,
        }
    }

    /// Normalizer and its derivatives with respect to the center angles.
    pub fn mass_with_grad(&self, center: (f64, f64)) -> KernelMass {
        let n = self.bins();
        let p = &self.params;
        let (mut sum, mut dt, mut dp) = (0.0, 0.0, 0.0);
        let mut a = Vec::with_capacity(3 * n);
        let mut b = Vec::with_capacity(3 * n);
        for &x in &self.centers {
            for s in [-PI, 0.0, PI] {
                a.push(x - center.0 + s);
                b.push(x - center.1 + s);
            }
        }
        for &ai in &a {
            let ai2 = p.beta * ai * ai;
            for &bj in &b {
                let r = 1.0 / (ai2 + p.beta * bj * bj + p.delta);
                let r2 = 2.0 * p.beta * r * r;
                sum += r;
                dt += r2 * ai;
                dp += r2 * bj;
            }
        }
        KernelMass {
            sum,
            d_theta: dt,
            d_phi: dp,
        }
    }

    /// Normalized kernel value at bin `(ta, pb)` and its derivatives, given
    /// the normalizer from [`Self::mass_with_grad`].
    pub fn value_with_grad(&self, ta: usize, pb: usize, center: (f64, f64), mass: &KernelMass) -> (f64, f64, f64) {
        let (v, dvt, dvp) = raw_kernel_with_grad(&self.params, self.centers[ta], self.centers[pb], center);
        let h = v / mass.sum;
        (h, (dvt - h * mass.d_theta) / mass.sum, (dvp - h * mass.d_phi) / mass.sum)
    }

    /// Normalized kernel at `center`.
    pub fn expand(&self, center: (f64, f64)) -> OrientationHistogram3D {
        let n = self.bins();
        let mut h = OrientationHistogram3D::zeros(n);
        let mut scratch = KernelScratch::default();
        self.accumulate(center, 1.0, h.values_mut(), &mut scratch, false);
        h.mark_normalized();
        h
    }
}

#[derive(Clone, Debug, Default)]
pub struct KernelScratch {
    a: Vec<f64>,
    b: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    row: Vec<f64>,
}

/// Normalized kernel histogram centered at `(θ, φ)`.
pub fn expand_kernel(center: (f64, f64), params: &KernelParams) -> OrientationHistogram3D {
    OrientationKernel::new(*params).expand(center)
}
