use nalgebra::{DVector, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::primitive::{segment_covariance, segment_covariance_grad, GaussianPrimitive};
use crate::error::{Error, Result};
use crate::geom::Strand;
use crate::latent::StrandLatentModel;

/// Control segments carrying color and diameter.
pub const ANCHORS: usize = 8;
/// Tail segments sharing the second opacity.
pub const TAIL_SEGMENTS: usize = 8;
/// Diameters are `DIAMETER_UNIT · softplus(raw)`, in metres.
pub const DIAMETER_UNIT: f64 = 1e-4;

/// How per-segment appearance is parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceMode {
    /// 8 anchors interpolated along the strand, two opacities.
    #[default]
    Anchored,
    /// Free color, diameter and opacity on every segment.
    PerSegment,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Piecewise-linear weights of segment `j` over `anchors` control points
/// spread evenly across `segments`: `(left anchor, right anchor, t)`.
pub fn anchor_weights(j: usize, segments: usize, anchors: usize) -> (usize, usize, f64) {
    if anchors < 2 || segments < 2 {
        return (0, 0, 0.0);
    }
    let t = j as f64 * (anchors - 1) as f64 / (segments - 1) as f64;
    let a = (t.floor() as usize).min(anchors - 2);
    (a, a + 1, t - a as f64)
}

/// Optimizable state of one strand.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainedGaussianStrand {
    pub root: Point3<f64>,
    pub latent: DVector<f64>,
    /// Latent at initialization, target of the latent regularizer.
    pub latent_init: DVector<f64>,
    pub mode: AppearanceMode,
    pub diameter_raw: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub opacity_raw: Vec<f64>,
    pub segments: usize,
}

/// Initial appearance of new strands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearanceInit {
    pub diameter: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Gradient of a loss with respect to the derived per-segment quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct StrandGrad {
    pub vertices: Vec<Vector3<f64>>,
    pub diameters: Vec<f64>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl StrandGrad {
    pub fn zeros(vertices: usize) -> Self {
        let s = vertices - 1;
        Self {
            vertices: vec![Vector3::zeros(); vertices],
            diameters: vec![0.0; s],
            opacities: vec![0.0; s],
            colors: vec![[0.0; 3]; s],
        }
    }
}

impl ChainedGaussianStrand {
    pub fn new(root: Point3<f64>, latent: DVector<f64>, segments: usize, mode: AppearanceMode, init: &AppearanceInit) -> Self {
        let (nd, no) = match mode {
            AppearanceMode::Anchored => (ANCHORS, 2),
            AppearanceMode::PerSegment => (segments, segments),
        };
        Self {
            root,
            latent_init: latent.clone(),
            latent,
            mode,
            diameter_raw: vec![softplus_inverse(init.diameter / DIAMETER_UNIT); nd],
            colors: vec![init.color; nd],
            opacity_raw: vec![logit(init.opacity); no],
            segments,
        }
    }

    /// Encodes `strand` into the latent space of `model`.
    pub fn from_strand(strand: &Strand, model: &StrandLatentModel, mode: AppearanceMode, init: &AppearanceInit) -> Result<Self> {
        let root = *strand.root().ok_or(Error::DegenerateStrand)?;
        Ok(Self::new(root, model.encode(strand)?, model.vertices() - 1, mode, init))
    }

    /// Number of optimizable scalars.
    pub fn param_count(&self) -> usize {
        self.latent.len() + self.appearance_count()
    }

    pub fn appearance_count(&self) -> usize {
        self.diameter_raw.len() + 3 * self.colors.len() + self.opacity_raw.len()
    }

    /// Appearance parameters flattened as diameters, colors, opacities.
    pub fn appearance_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.appearance_count());
        out.extend_from_slice(&self.diameter_raw);
        out.extend(self.colors.iter().flatten());
        out.extend_from_slice(&self.opacity_raw);
        out
    }

    pub fn set_appearance_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.appearance_count());
        let nd = self.diameter_raw.len();
        let nc = self.colors.len();
        self.diameter_raw.copy_from_slice(&p[..nd]);
        for (i, c) in self.colors.iter_mut().enumerate() {
            c.copy_from_slice(&p[nd + 3 * i..nd + 3 * i + 3]);
        }
        self.opacity_raw.copy_from_slice(&p[nd + 3 * nc..]);
    }

    pub fn vertices(&self, model: &StrandLatentModel) -> Vec<Point3<f64>> {
        model.decode(&self.latent, &self.root).vertices
    }

    pub fn strand(&self, model: &StrandLatentModel) -> Strand {
        model.decode(&self.latent, &self.root)
    }

    fn interpolate<T: Copy>(&self, j: usize, vals: &[T], mix: impl Fn(T, T, f64) -> T) -> T {
        match self.mode {
            AppearanceMode::Anchored => {
                let (a, b, t) = anchor_weights(j, self.segments, vals.len());
                mix(vals[a], vals[b], t)
            }
            AppearanceMode::PerSegment => vals[j],
        }
    }

    pub fn segment_diameter(&self, j: usize) -> f64 {
        let d = |i: usize| DIAMETER_UNIT * softplus(self.diameter_raw[i]);
        match self.mode {
            AppearanceMode::Anchored => {
                let (a, b, t) = anchor_weights(j, self.segments, self.diameter_raw.len());
                (1.0 - t) * d(a) + t * d(b)
            }
            AppearanceMode::PerSegment => d(j),
        }
    }

    pub fn segment_color(&self, j: usize) -> [f64; 3] {
        self.interpolate(j, &self.colors, |a, b, t| std::array::from_fn(|c| (1.0 - t) * a[c] + t * b[c]))
    }

    fn opacity_slot(&self, j: usize) -> usize {
        match self.mode {
            AppearanceMode::Anchored => usize::from(j + TAIL_SEGMENTS >= self.segments),
            AppearanceMode::PerSegment => j,
        }
    }

    pub fn segment_opacity(&self, j: usize) -> f64 {
        sigmoid(self.opacity_raw[self.opacity_slot(j)])
    }

    pub fn diameters(&self) -> Vec<f64> {
        (0..self.segments).map(|j| self.segment_diameter(j)).collect()
    }

    pub fn opacities(&self) -> Vec<f64> {
        (0..self.segments).map(|j| self.segment_opacity(j)).collect()
    }

    /// Mean opacity over segments.
    pub fn mean_opacity(&self) -> f64 {
        self.opacities().iter().sum::<f64>() / self.segments as f64
    }

    /// One Gaussian per non-degenerate segment, tagged with its segment.
    pub fn expand(&self, vertices: &[Point3<f64>]) -> Vec<(usize, GaussianPrimitive)> {
        (0..self.segments)
            .filter_map(|j| {
                let cov = segment_covariance(&vertices[j], &vertices[j + 1], self.segment_diameter(j))?;
                Some((
                    j,
                    GaussianPrimitive {
                        center: nalgebra::center(&vertices[j], &vertices[j + 1]),
                        covariance: cov,
                        opacity: self.segment_opacity(j),
                        color: self.segment_color(j),
                    },
                ))
            })
            .collect()
    }

    /// Adds the effect of a primitive gradient on segment `j` into `out`.
    pub fn accumulate_segment_grad(
        &self,
        vertices: &[Point3<f64>],
        j: usize,
        g: &super::splat::PrimitiveGrad,
        out: &mut StrandGrad,
    ) {
        let u = vertices[j + 1] - vertices[j];
        let (du, dd) = segment_covariance_grad(&u, self.segment_diameter(j), &g.covariance);
        out.vertices[j] += g.center * 0.5 - du;
        out.vertices[j + 1] += g.center * 0.5 + du;
        out.diameters[j] += dd;
        out.opacities[j] += g.opacity;
        for c in 0..3 {
            out.colors[j][c] += g.color[c];
        }
    }

    /// Gradient of latent parameters; the root is fixed and ignored.
    pub fn latent_grad(&self, model: &StrandLatentModel, g: &StrandGrad) -> DVector<f64> {
        let d = DVector::from_iterator(3 * self.segments, g.vertices[1..].iter().flat_map(|v| [v.x, v.y, v.z]));
        model.latent_gradient(&d)
    }

    /// Gradient of appearance parameters, in [`Self::appearance_params`] order.
    pub fn appearance_grad(&self, g: &StrandGrad) -> Vec<f64> {
        let nd = self.diameter_raw.len();
        let nc = self.colors.len();
        let mut out = vec![0.0; self.appearance_count()];
        for j in 0..self.segments {
            let (a, b, t) = match self.mode {
                AppearanceMode::Anchored => anchor_weights(j, self.segments, ANCHORS),
                AppearanceMode::PerSegment => (j, j, 0.0),
            };
            let slope = |i: usize| DIAMETER_UNIT * sigmoid(self.diameter_raw[i]);
            out[a] += g.diameters[j] * (1.0 - t) * slope(a);
            if t > 0.0 {
                out[b] += g.diameters[j] * t * slope(b);
            }
            for c in 0..3 {
                out[nd + 3 * a + c] += g.colors[j][c] * (1.0 - t);
                if t > 0.0 {
                    out[nd + 3 * b + c] += g.colors[j][c] * t;
                }
            }
            let k = self.opacity_slot(j);
            let o = sigmoid(self.opacity_raw[k]);
            out[nd + 3 * nc + k] += g.opacities[j] * o * (1.0 - o);
        }
        out
    }
}
