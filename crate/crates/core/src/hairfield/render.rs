//! Alpha compositing of field samples along a ray: orientation histograms,
//! occupancies and radiance.

use nalgebra::{Point3, Vector3};
use rand::Rng;

use super::field::{FieldSample, HairField, Stencil};
use super::kernel::{KernelScratch, OrientationKernel};
use crate::error::{Error, Result};
use crate::geom::OrientationHistogram3D;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub depth: f64,
    /// Optical path multiplier: `α = 1 − exp(−σ · delta)`.
    pub delta: f64,
    pub value: FieldSample,
    pub stencil: Option<Stencil>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleSet {
    pub origin: Point3<f64>,
    pub dir: Vector3<f64>,
    pub samples: Vec<RaySample>,
}

impl RaySampleSet {
    /// Validates that depths are strictly increasing.
    pub fn new(origin: Point3<f64>, dir: Vector3<f64>, samples: Vec<RaySample>) -> Result<Self> {
        if samples.windows(2).any(|w| !(w[1].depth > w[0].depth)) {
            return Err(Error::contract("ray sample depths must be strictly increasing"));
        }
        Ok(Self { origin, dir, samples })
    }

    /// Samples without field backing, for direct evaluation.
    pub fn from_values(values: &[(f64, f64, FieldSample)]) -> Result<Self> {
        let samples = values
            .iter()
            .map(|&(depth, delta, value)| RaySample {
                depth,
                delta,
                value,
                stencil: None,
            })
            .collect();
        Self::new(Point3::origin(), Vector3::z(), samples)
    }

    /// Stratified samples over `[t_near, t_far]`: stratum midpoints, or a
    /// uniform position per stratum when `jitter` is given.
    pub fn march<R: Rng>(
        field: &HairField,
        origin: Point3<f64>,
        dir: Vector3<f64>,
        range: (f64, f64),
        count: usize,
        density_scale: f64,
        mut jitter: Option<&mut R>,
    ) -> Self {
        let (tn, tf) = range;
        let step = (tf - tn) / count as f64;
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            let u = match jitter.as_deref_mut() {
                Some(r) => r.gen::<f64>().clamp(1e-6, 1.0 - 1e-6),
                None => 0.5,
            };
            let t = tn + (k as f64 + u) * step;
            let p = origin + dir * t;
            if let Some(st) = field.stencil(&p) {
                samples.push(RaySample {
                    depth: t,
                    delta: step * density_scale,
                    value: field.sample_stencil(&st),
                    stencil: Some(st),
                });
            }
        }
        Self { origin, dir, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-sample opacity, transmittance before the sample and blend weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Compositing {
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weight: Vec<f64>,
    /// Transmittance left after the last sample.
    pub residual: f64,
}

pub fn composite(samples: &RaySampleSet) -> Compositing {
    let n = samples.len();
    let mut out = Compositing {
        alpha: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        weight: Vec::with_capacity(n),
        residual: 1.0,
    };
    let mut optical = 0.0f64;
    for s in &samples.samples {
        let x = s.value.sigma * s.delta;
        let t = (-optical).exp();
        let a = -(-x).exp_m1();
        out.alpha.push(a);
        out.transmittance.push(t);
        out.weight.push(t * a);
        optical += x;
    }
    out.residual = (-optical).exp();
    out
}

/// Gradient with respect to each sample's optical thickness `σ·delta`,
/// given gradients of the blend weights and of the residual transmittance.
pub fn composite_backward(c: &Compositing, d_weight: &[f64], d_residual: f64) -> Vec<f64> {
    let n = c.weight.len();
    let mut out = vec![0.0; n];
    // Suffix sum of d_weight[k] * weight[k] for k > j.
    let mut tail = 0.0;
    for j in (0..n).rev() {
        out[j] = c.transmittance[j] * (1.0 - c.alpha[j]) * d_weight[j] - tail - d_residual * c.residual;
        tail += d_weight[j] * c.weight[j];
    }
    out
}

/// Accumulated, unnormalized orientation histogram along the ray.
pub fn render_ray_distribution(samples: &RaySampleSet, kernel: &OrientationKernel) -> OrientationHistogram3D {
    let c = composite(samples);
    let centers: Vec<_> = samples
        .samples
        .iter()
        .zip(&c.weight)
        .map(|(s, &w)| ((s.value.theta, s.value.phi), w))
        .collect();
    blend_distributions(&centers, kernel)
}

/// Σ weight · kernel(center), for explicit per-sample blend weights.
pub fn blend_distributions(items: &[((f64, f64), f64)], kernel: &OrientationKernel) -> OrientationHistogram3D {
    let n = kernel.bins();
    let mut h = OrientationHistogram3D::zeros(n);
    let mut scratch = KernelScratch::default();
    let buf = h.values_mut();
    for &(center, w) in items {
        if w != 0.0 {
            kernel.accumulate(center, w, buf, &mut scratch, false);
        }
    }
    h
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Occupancy {
    pub psi_h: f64,
    pub psi_b: f64,
    pub rgb: [f64; 3],
    pub alpha: f64,
}

pub fn render_occupancy(samples: &RaySampleSet) -> Occupancy {
    let c = composite(samples);
    let mut o = Occupancy::default();
    for (s, &w) in samples.samples.iter().zip(&c.weight) {
        o.psi_h += w * s.value.rho_h;
        o.psi_b += w * s.value.rho_b;
        for k in 0..3 {
            o.rgb[k] += w * s.value.rgb[k];
        }
    }
    o.alpha = 1.0 - c.residual;
    o
}
