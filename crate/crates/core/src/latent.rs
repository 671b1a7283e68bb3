//! Per-subject linear strand latent space: principal components of
//! root-relative vertex offsets, whitened.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Point3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geom::strand::ByteReader;
use crate::geom::{Strand, STRAND_VERTICES};

pub const LATENT_DIM: usize = 128;

const SLAT_MAGIC: &[u8; 4] = b"SLAT";

/// Relative floor for component scales, against the largest one.
const SCALE_FLOOR: f64 = 1e-2;
/// Absolute floor in metres, for degenerate training sets.
const MIN_SCALE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct StrandLatentModel {
    vertices: usize,
    /// Root-relative offsets of vertices 1.., flattened xyz.
    mean: DVector<f64>,
    /// One orthonormal component per row.
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    /// Variance of every component (before the floor), descending.
    variances: DVector<f64>,
}

/// Root-relative offsets of vertices `1..`, flattened.
pub fn strand_offsets(s: &Strand) -> DVector<f64> {
    let r = s.vertices[0];
    DVector::from_iterator(
        3 * (s.len() - 1),
        s.vertices[1..].iter().flat_map(|v| {
            let d = v - r;
            [d.x, d.y, d.z]
        }),
    )
}

impl StrandLatentModel {
    /// Fits the top `dim` principal components. With fewer strands than
    /// `dim + 1` the trailing components carry no variance; they keep a
    /// floored scale and a warning is logged.
    pub fn fit(strands: &[Strand], dim: usize) -> Result<Self> {
        let nv = strands.first().map(|s| s.len()).ok_or_else(|| Error::contract("latent fit needs strands"))?;
        if nv < 2 || strands.iter().any(|s| s.len() != nv) {
            return Err(Error::contract("latent fit needs strands with one common vertex count ≥ 2"));
        }
        let d = 3 * (nv - 1);
        if dim == 0 || dim > d {
            return Err(Error::contract(format!("latent dimension must lie in 1..={d}")));
        }
        if strands.len() <= dim {
            log::warn!("latent fit: {} strands for {} components; model is rank deficient", strands.len(), dim);
        }
        let m = strands.len() as f64;
        let rows: Vec<DVector<f64>> = strands.iter().map(strand_offsets).collect();
        let mut mean = DVector::zeros(d);
        for r in &rows {
            mean += r;
        }
        mean /= m;
        let mut cov = DMatrix::zeros(d, d);
        for r in &rows {
            let c = r - &mean;
            cov.syger(1.0, &c, &c, 1.0);
        }
        cov /= (m - 1.0).max(1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let variances = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
        let mut basis = DMatrix::zeros(dim, d);
        for (row, &i) in order.iter().take(dim).enumerate() {
            let mut v = eig.eigenvectors.column(i).clone_owned();
            // Deterministic sign: largest-magnitude entry positive.
            let k = v.iamax();
            if v[k] < 0.0 {
                v = -v;
            }
            basis.row_mut(row).copy_from(&v.transpose());
        }
        let top = variances[0].sqrt();
        let floor = (SCALE_FLOOR * top).max(MIN_SCALE);
        let scales = DVector::from_iterator(dim, (0..dim).map(|k| variances[k].sqrt().max(floor)));
        Ok(Self {
            vertices: nv,
            mean,
            basis,
            scales,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn scales(&self) -> &DVector<f64> {
        &self.scales
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn mean_offsets(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Share of total variance captured by the first `k` components.
    pub fn explained_variance(&self, k: usize) -> f64 {
        let total: f64 = self.variances.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        self.variances.iter().take(k).sum::<f64>() / total
    }

    pub fn encode(&self, s: &Strand) -> Result<DVector<f64>> {
        if s.len() != self.vertices {
            return Err(Error::contract(format!("encode expects {} vertices, got {}", self.vertices, s.len())));
        }
        Ok(self.encode_offsets(&strand_offsets(s)))
    }

    pub fn encode_offsets(&self, offsets: &DVector<f64>) -> DVector<f64> {
        (&self.basis * (offsets - &self.mean)).component_div(&self.scales)
    }

    /// Root-relative offsets for latent `l`.
    pub fn decode_offsets(&self, l: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.basis.tr_mul(&l.component_mul(&self.scales))
    }

    pub fn decode(&self, l: &DVector<f64>, root: &Point3<f64>) -> Strand {
        let o = self.decode_offsets(l);
        let mut v = Vec::with_capacity(self.vertices);
        v.push(*root);
        for i in 0..self.vertices - 1 {
            v.push(root + nalgebra::Vector3::new(o[3 * i], o[3 * i + 1], o[3 * i + 2]));
        }
        Strand::new(v, true)
    }

    /// Pulls a gradient on the flattened offsets back to the latent:
    /// `scales ⊙ (B · g)`.
    pub fn latent_gradient(&self, d_offsets: &DVector<f64>) -> DVector<f64> {
        (&self.basis * d_offsets).component_mul(&self.scales)
    }

    /// Derivative of offset coordinate `j` with respect to latent `k`.
    pub fn jacobian_entry(&self, j: usize, k: usize) -> f64 {
        self.basis[(k, j)] * self.scales[k]
    }

    pub fn encode_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SLAT_MAGIC);
        let d = self.mean.len();
        for v in [self.vertices as u32, self.dim() as u32, d as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut put = |x: f64| out.extend_from_slice(&(x as f32).to_le_bytes());
        self.mean.iter().for_each(|&x| put(x));
        for r in 0..self.dim() {
            self.basis.row(r).iter().for_each(|&x| put(x));
        }
        self.scales.iter().for_each(|&x| put(x));
        self.variances.iter().for_each(|&x| put(x));
        out
    }

    pub fn decode_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, "SLAT");
        r.magic(SLAT_MAGIC)?;
        let vertices = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let d = r.u32()? as usize;
        if vertices < 2 || d != 3 * (vertices - 1) || dim == 0 || dim > d {
            return Err(Error::format("SLAT", "inconsistent dimensions"));
        }
        let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.f32().map(|x| x as f64)).collect() };
        let mean = DVector::from_vec(read(d)?);
        let basis = DMatrix::from_row_slice(dim, d, &read(dim * d)?);
        let scales = DVector::from_vec(read(dim)?);
        let variances = DVector::from_vec(read(d)?);
        r.finish()?;
        if scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::format("SLAT", "component scales must be positive"));
        }
        Ok(Self {
            vertices,
            mean,
            basis,
            scales,
            variances,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode_bytes(&std::fs::read(path)?)
    }
}

/// Fits the standard 128-component model on strands with
/// [`STRAND_VERTICES`] vertices.
pub fn fit_latent_model(strands: &[Strand]) -> Result<StrandLatentModel> {
    StrandLatentModel::fit(strands, LATENT_DIM.min(3 * (STRAND_VERTICES - 1)))
}
