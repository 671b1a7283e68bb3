use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::geom::angles::{direction, direction_jacobian, wrap_pi};
use crate::geom::strand::ByteReader;
use crate::geom::HairBBox;

/// Dense voxel grid of density, occupancies, orientation and radiance.
/// Voxel `(i, j, k)` is centered at `min + (i + 0.5) * cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct HairField {
    pub dims: [usize; 3],
    pub bbox: HairBBox,
    pub sigma: Vec<f64>,
    pub rho_h: Vec<f64>,
    pub rho_b: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
}

/// Trilinear stencil: eight voxel indices and weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub idx: [u32; 8],
    pub w: [f64; 8],
}

/// Interpolated field values at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub rho_h: f64,
    pub rho_b: f64,
    pub theta: f64,
    pub phi: f64,
    pub rgb: [f64; 3],
}

impl FieldSample {
    pub fn orientation(&self) -> Vector3<f64> {
        direction(self.theta, self.phi)
    }
}

/// Result of [`HairField::query`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldQuery {
    pub sigma: f64,
    pub rho_h: f64,
    pub rho_b: f64,
    pub orientation: Vector3<f64>,
}

/// Added to σ when weighting angles, so empty regions still interpolate.
pub(crate) const ANGLE_DENSITY_FLOOR: f64 = 1e-3;

/// Interpolates an angle of period π on the doubled-angle circle.
/// Returns the angle and the squared resultant length.
pub(crate) fn blend_angle(angles: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64, f64) {
    let (mut s, mut c) = (0.0, 0.0);
    for (w, a) in angles {
        let (sa, ca) = (2.0 * a).sin_cos();
        s += w * sa;
        c += w * ca;
    }
    (wrap_pi(0.5 * s.atan2(c)), s, c, s * s + c * c)
}

impl HairField {
    pub fn new(dims: [usize; 3], bbox: HairBBox) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            bbox,
            sigma: vec![0.0; n],
            rho_h: vec![0.0; n],
            rho_b: vec![0.0; n],
            theta: vec![std::f64::consts::FRAC_PI_2; n],
            phi: vec![std::f64::consts::FRAC_PI_2; n],
            rgb: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Angles blend with trilinear weight times this, so empty voxels do
    /// not bleed orientation into occupied ones.
    #[inline]
    pub(crate) fn angle_weight(&self, i: usize) -> f64 {
        self.sigma[i] + ANGLE_DENSITY_FLOOR
    }

    pub fn cell(&self) -> Vector3<f64> {
        let e = self.bbox.extent();
        Vector3::new(e.x / self.dims[0] as f64, e.y / self.dims[1] as f64, e.z / self.dims[2] as f64)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        let c = self.cell();
        self.bbox.min + Vector3::new((i as f64 + 0.5) * c.x, (j as f64 + 0.5) * c.y, (k as f64 + 0.5) * c.z)
    }

    pub fn voxel_of(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        if !self.bbox.contains(p) {
            return None;
        }
        let c = self.cell();
        let r = p - self.bbox.min;
        let f = |v: f64, cell: f64, n: usize| ((v / cell) as usize).min(n - 1);
        Some([f(r.x, c.x, self.dims[0]), f(r.y, c.y, self.dims[1]), f(r.z, c.z, self.dims[2])])
    }

    /// Trilinear stencil with clamp-to-edge; `None` outside the box.
    pub fn stencil(&self, p: &Point3<f64>) -> Option<Stencil> {
        if !self.bbox.contains(p) {
            return None;
        }
        let c = self.cell();
        let r = p - self.bbox.min;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut fr = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = (r[a] / c[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            fr[a] = if n > 1 { u - i0 as f64 } else { 0.0 };
        }
        let mut idx = [0u32; 8];
        let mut w = [0.0; 8];
        for corner in 0..8 {
            let pick = |a: usize| if corner >> a & 1 == 1 { (hi[a], fr[a]) } else { (lo[a], 1.0 - fr[a]) };
            let (i, wi) = pick(0);
            let (j, wj) = pick(1);
            let (k, wk) = pick(2);
            idx[corner] = self.index(i, j, k) as u32;
            w[corner] = wi * wj * wk;
        }
        Some(Stencil { idx, w })
    }

    /// Stencil plus the derivative of every weight with respect to `p`.
    fn stencil_with_gradient(&self, p: &Point3<f64>) -> Option<(Stencil, [Vector3<f64>; 8])> {
        if !self.bbox.contains(p) {
            return None;
        }
        let c = self.cell();
        let r = p - self.bbox.min;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut fr = [0.0f64; 3];
        let mut dfr = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let raw = r[a] / c[a] - 0.5;
            let u = raw.clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            fr[a] = if n > 1 { u - i0 as f64 } else { 0.0 };
            dfr[a] = if n > 1 && raw == u { 1.0 / c[a] } else { 0.0 };
        }
        let mut idx = [0u32; 8];
        let mut w = [0.0; 8];
        let mut dw = [Vector3::zeros(); 8];
        for corner in 0..8 {
            let mut f = [0.0; 3];
            let mut df = [0.0; 3];
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    (ijk[a], f[a], df[a]) = (hi[a], fr[a], dfr[a]);
                } else {
                    (ijk[a], f[a], df[a]) = (lo[a], 1.0 - fr[a], -dfr[a]);
                }
            }
            idx[corner] = self.index(ijk[0], ijk[1], ijk[2]) as u32;
            w[corner] = f[0] * f[1] * f[2];
            dw[corner] = Vector3::new(df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]);
        }
        Some((Stencil { idx, w }, dw))
    }

    /// Interpolated unit orientation at `p` and its Jacobian with respect
    /// to `p` (rows: orientation components). `None` outside the box.
    pub fn orientation_with_gradient(&self, p: &Point3<f64>) -> Option<(Vector3<f64>, Matrix3<f64>)> {
        let (st, dw) = self.stencil_with_gradient(p)?;
        let angle = |vals: &[f64]| {
            let (a, s, c, r2) = blend_angle(st.idx.iter().zip(&st.w).map(|(&i, &w)| (w * self.angle_weight(i as usize), vals[i as usize])));
            let mut grad = Vector3::zeros();
            if r2 > 0.0 {
                for (k, &i) in st.idx.iter().enumerate() {
                    let (si, ci) = (2.0 * vals[i as usize]).sin_cos();
                    grad += dw[k] * (self.angle_weight(i as usize) * 0.5 * (c * si - s * ci) / r2);
                }
            }
            (a, grad)
        };
        let (theta, dtheta) = angle(&self.theta);
        let (phi, dphi) = angle(&self.phi);
        let (jt, jp) = direction_jacobian(theta, phi);
        Some((direction(theta, phi), jt * dtheta.transpose() + jp * dphi.transpose()))
    }

    pub fn sample_stencil(&self, st: &Stencil) -> FieldSample {
        let mut out = FieldSample::default();
        for (&i, &w) in st.idx.iter().zip(&st.w) {
            let i = i as usize;
            out.sigma += w * self.sigma[i];
            out.rho_h += w * self.rho_h[i];
            out.rho_b += w * self.rho_b[i];
            for c in 0..3 {
                out.rgb[c] += w * self.rgb[i][c];
            }
        }
        let it = || st.idx.iter().zip(&st.w).map(|(&i, &w)| (i as usize, w * self.angle_weight(i as usize)));
        out.theta = blend_angle(it().map(|(i, w)| (w, self.theta[i]))).0;
        out.phi = blend_angle(it().map(|(i, w)| (w, self.phi[i]))).0;
        out
    }

    pub fn sample(&self, p: &Point3<f64>) -> Option<FieldSample> {
        self.stencil(p).map(|s| self.sample_stencil(&s))
    }

    /// Density, occupancies and unit orientation; zeros outside the box.
    pub fn query(&self, p: &Point3<f64>) -> FieldQuery {
        match self.sample(p) {
            Some(s) => FieldQuery {
                sigma: s.sigma,
                rho_h: s.rho_h,
                rho_b: s.rho_b,
                orientation: s.orientation(),
            },
            None => FieldQuery {
                sigma: 0.0,
                rho_h: 0.0,
                rho_b: 0.0,
                orientation: Vector3::zeros(),
            },
        }
    }

    /// Clamps every channel into its valid range and wraps angles.
    pub fn project_to_valid(&mut self) {
        for v in self.sigma.iter_mut().chain(self.rho_h.iter_mut()).chain(self.rho_b.iter_mut()) {
            *v = v.clamp(0.0, 1.0);
        }
        for c in self.rgb.iter_mut().flatten() {
            *c = c.clamp(0.0, 1.0);
        }
        for a in self.theta.iter_mut().chain(self.phi.iter_mut()) {
            *a = wrap_pi(*a);
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        let ang = |v: &f64| *v > 0.0 && *v <= std::f64::consts::PI;
        self.sigma.iter().all(unit)
            && self.rho_h.iter().all(unit)
            && self.rho_b.iter().all(unit)
            && self.rgb.iter().flatten().all(unit)
            && self.theta.iter().all(ang)
            && self.phi.iter().all(ang)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + self.len() * 32);
        out.extend_from_slice(b"HFLD");
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for c in self.bbox.min.iter().chain(self.bbox.max.iter()) {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        for i in 0..self.len() {
            let rec = [
                self.sigma[i],
                self.rho_h[i],
                self.rho_b[i],
                self.theta[i],
                self.phi[i],
                self.rgb[i][0],
                self.rgb[i][1],
                self.rgb[i][2],
            ];
            for v in rec {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, "HFLD");
        r.magic(b"HFLD")?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::format("HFLD", "zero grid dimension"));
        }
        let mut c = [0.0f64; 6];
        for v in c.iter_mut() {
            *v = r.f32()? as f64;
        }
        let bbox = HairBBox::new(Point3::new(c[0], c[1], c[2]), Point3::new(c[3], c[4], c[5]))
            .map_err(|e| Error::format("HFLD", e.to_string()))?;
        let mut f = HairField::new(dims, bbox);
        let n = f.len();
        if data.len() != 40 + n * 32 {
            return Err(Error::format("HFLD", "record count does not match grid dimensions"));
        }
        for i in 0..n {
            f.sigma[i] = r.f32()? as f64;
            f.rho_h[i] = r.f32()? as f64;
            f.rho_b[i] = r.f32()? as f64;
            f.theta[i] = r.f32()? as f64;
            f.phi[i] = r.f32()? as f64;
            for c in 0..3 {
                f.rgb[i][c] = r.f32()? as f64;
            }
        }
        r.finish()?;
        Ok(f)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
