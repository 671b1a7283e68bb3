//! Per-camera mapping of 3D orientation bins to image line-angle bins and
//! the max-projection of accumulated histograms.

use crate::error::{Error, Result};
use crate::geom::angles::{angle_bin, bin_center, direction};
use crate::geom::{Camera, OrientationHistogram2D, OrientationHistogram3D};

/// Bins whose direction lies along the optical axis.
pub const DEGENERATE_BIN: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTable {
    bins: usize,
    /// Image bin per 3D bin (row-major θ then φ).
    map: Vec<u16>,
}

/// Max-projected values before normalization, with the winning 3D bin per
/// image bin.
#[derive(Clone, Debug, PartialEq)]
pub struct RawProjection {
    pub values: Vec<f64>,
    pub argmax: Vec<Option<u32>>,
}

impl ProjectionTable {
    pub fn new(cam: &Camera, bins: usize) -> Self {
        let mut map = Vec::with_capacity(bins * bins);
        for ta in 0..bins {
            for pb in 0..bins {
                let d = direction(bin_center(ta, bins), bin_center(pb, bins));
                let m = match cam.project_direction_tol(&d, 1e-6) {
                    Ok(eta) => angle_bin(eta, bins) as u16,
                    Err(_) => DEGENERATE_BIN,
                };
                map.push(m);
            }
        }
        Self { bins, map }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Image bin of 3D bin `(ta, pb)`, `None` when degenerate.
    pub fn image_bin(&self, ta: usize, pb: usize) -> Option<usize> {
        let m = self.map[ta * self.bins + pb];
        (m != DEGENERATE_BIN).then_some(m as usize)
    }

    /// Max over each image bin's preimage; empty preimages give 0.
    pub fn project_raw(&self, values: &[f64]) -> RawProjection {
        let mut out = RawProjection {
            values: vec![0.0; self.bins],
            argmax: vec![None; self.bins],
        };
        for (i, (&m, &v)) in self.map.iter().zip(values).enumerate() {
            if m == DEGENERATE_BIN {
                continue;
            }
            let e = m as usize;
            if out.argmax[e].is_none() || v > out.values[e] {
                out.values[e] = v;
                out.argmax[e] = Some(i as u32);
            }
        }
        out
    }
}

/// Max-projection of `h3` into a normalized image-angle distribution.
pub fn project_distribution(h3: &OrientationHistogram3D, table: &ProjectionTable) -> Result<OrientationHistogram2D> {
    if h3.bins() != table.bins() {
        return Err(Error::contract("histogram and projection table bin counts differ"));
    }
    let raw = table.project_raw(h3.values());
    let mut h = OrientationHistogram2D::from_values(raw.values)?;
    h.normalize()?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::angles::to_angles;
    use crate::hairfield::kernel::{expand_kernel, KernelParams};
    use nalgebra::{Matrix3, Matrix3x4, Vector3};
    use std::f64::consts::PI;

    fn identity_camera() -> Camera {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        let mut e = Matrix3x4::zeros();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        Camera::new(k, e, 100, 100).unwrap()
    }

    #[test]
    fn y_axis_bin_maps_to_the_vertical_bin() {
        let t = ProjectionTable::new(&identity_camera(), 64);
        let (th, ph) = to_angles(&Vector3::new(0.0, 1.0, 0.0));
        let (ta, pb) = (angle_bin(th, 64), angle_bin(ph, 64));
        let e = t.image_bin(ta, pb).unwrap();
        let lo = e as f64 * PI / 64.0;
        // Bin centers sit slightly off the axis; the vertical bin or its
        // neighbour below.
        assert!(e == angle_bin(PI / 2.0, 64) || e == angle_bin(PI / 2.0, 64) + 1, "{e} {lo}");
    }

    #[test]
    fn bin_map_is_undirected() {
        let cam = identity_camera();
        let t = ProjectionTable::new(&cam, 64);
        for ta in 0..64 {
            for pb in 0..64 {
                let d = direction(bin_center(ta, 64), bin_center(pb, 64));
                let a = cam.project_direction_tol(&d, 1e-6).ok().map(|e| angle_bin(e, 64));
                let b = cam.project_direction_tol(&(-d), 1e-6).ok().map(|e| angle_bin(e, 64));
                assert_eq!(a, b);
                assert_eq!(t.image_bin(ta, pb), a);
            }
        }
    }

    #[test]
    fn quarter_roll_shifts_every_bin_by_half() {
        let cam = identity_camera();
        let a = ProjectionTable::new(&cam, 64);
        let b = ProjectionTable::new(&cam.rolled(PI / 2.0), 64);
        for ta in 0..64 {
            for pb in 0..64 {
                if let (Some(x), Some(y)) = (a.image_bin(ta, pb), b.image_bin(ta, pb)) {
                    assert_eq!((x + 32) % 64, y);
                }
            }
        }
    }

    #[test]
    fn uniform_projects_to_uniform() {
        let t = ProjectionTable::new(&identity_camera(), 64);
        let h = OrientationHistogram3D::from_values(64, vec![1.0 / 4096.0; 4096]).unwrap();
        let p = project_distribution(&h, &t).unwrap();
        for v in p.values() {
            assert!((v - 1.0 / 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_kernel_peak_projects_to_its_direction() {
        let cam = identity_camera();
        let t = ProjectionTable::new(&cam, 64);
        for (ta, pb) in [(10usize, 20usize), (32, 5), (50, 60)] {
            let c = (bin_center(ta, 64), bin_center(pb, 64));
            let h = expand_kernel(c, &KernelParams::default());
            let p = project_distribution(&h, &t).unwrap();
            let expect = angle_bin(cam.project_direction(&direction(c.0, c.1)).unwrap(), 64);
            assert_eq!(p.argmax(), expect);
        }
    }
}
