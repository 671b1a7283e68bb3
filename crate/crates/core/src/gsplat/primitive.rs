use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::TriMesh;

/// Disc thickness of body Gaussians, in metres.
pub const BODY_THICKNESS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub center: Point3<f64>,
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Columns `(e, e', e'')`: `e` plus a completion built from the coordinate
/// axis least aligned with it.
pub fn orthonormal_frame(e: &Vector3<f64>) -> Matrix3<f64> {
    let e = e.normalize();
    let k = e.iamin();
    let mut axis = Vector3::zeros();
    axis[k] = 1.0;
    let e1 = (axis - e * e.dot(&axis)).normalize();
    let e2 = e.cross(&e1);
    Matrix3::from_columns(&[e, e1, e2])
}

/// Covariance of the Gaussian spanning segment `v0 → v1` with the given
/// diameter. `None` for a zero-length segment.
pub fn segment_covariance(v0: &Point3<f64>, v1: &Point3<f64>, diameter: f64) -> Option<Matrix3<f64>> {
    let u = v1 - v0;
    let len = u.norm();
    if len <= f64::MIN_POSITIVE {
        return None;
    }
    let e = orthonormal_frame(&u);
    let d = Matrix3::from_diagonal(&Vector3::new(0.5 * len, 0.5 * diameter, 0.5 * diameter));
    Some(e * d * d.transpose() * e.transpose())
}

/// Pulls `g = dL/dC` back to the segment vector `u = v1 - v0` and the
/// diameter, using `C = a I + u uᵀ/4 - a u uᵀ/|u|²` with `a = d²/4`.
pub fn segment_covariance_grad(u: &Vector3<f64>, diameter: f64, g: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    let a = 0.25 * diameter * diameter;
    let n2 = u.norm_squared();
    let gu = g * u;
    let q = u.dot(&gu);
    let du = gu * 0.5 - (gu * (2.0 / n2) - u * (2.0 * q / (n2 * n2))) * a;
    let da = g.trace() - q / n2;
    (du, da * 0.5 * diameter)
}

pub fn disc_covariance(normal: &Vector3<f64>, radius: f64, thickness: f64) -> Matrix3<f64> {
    let nn = normal * normal.transpose();
    (Matrix3::identity() - nn) * (radius * radius) + nn * (thickness * thickness)
}

/// `dL/dw` for [`disc_covariance`] given `g = dL/dC`.
pub fn disc_radius_grad(normal: &Vector3<f64>, radius: f64, g: &Matrix3<f64>) -> f64 {
    2.0 * radius * (g.trace() - normal.dot(&(g * normal)))
}

/// Opaque discs anchored at the inner-mesh vertices, standing in for the
/// non-hair foreground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyGaussians {
    pub centers: Vec<Point3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
    pub initial_radii: Vec<f64>,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl BodyGaussians {
    /// One disc per vertex; initial radius is the mean incident edge length.
    pub fn from_mesh(mesh: &TriMesh, color: [f64; 3]) -> Self {
        let radii = mesh.mean_incident_edge_length();
        Self {
            centers: mesh.vertices.clone(),
            normals: mesh.normals.clone(),
            initial_radii: radii.clone(),
            radii,
            color,
            opacity: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            center: self.centers[i],
            covariance: disc_covariance(&self.normals[i], self.radii[i], BODY_THICKNESS),
            opacity: self.opacity,
            color: self.color,
        }
    }

    pub fn primitives(&self) -> Vec<GaussianPrimitive> {
        (0..self.len()).map(|i| self.primitive(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    #[test]
    fn axis_aligned_segment() {
        let c = segment_covariance(&Point3::origin(), &Point3::new(0.0, 0.0, 0.002), 1e-4).unwrap();
        let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        assert!((ev[0] - 1e-6).abs() < 1e-18);
        assert!((ev[1] - 2.5e-9).abs() < 1e-18 && (ev[2] - 2.5e-9).abs() < 1e-18);
        assert!(segment_covariance(&Point3::origin(), &Point3::origin(), 1e-4).is_none());
    }

    #[test]
    fn disc_is_flat_along_normal() {
        let n = Vector3::new(0.0, 1.0, 0.0);
        let c = disc_covariance(&n, 0.01, BODY_THICKNESS);
        assert!((n.dot(&(c * n)) - 1e-12).abs() < 1e-20);
        assert!((c[(0, 0)] - 1e-4).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn frame_is_orthonormal(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
            let e = Vector3::new(x, y, z);
            prop_assume!(e.norm() > 1e-3);
            let f = orthonormal_frame(&e);
            prop_assert!((f.transpose() * f - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((f.column(0) - e.normalize()).norm() < 1e-12);
        }

        #[test]
        fn covariance_eigenstructure(
            a in prop::array::uniform3(-0.01..0.01f64),
            b in prop::array::uniform3(-0.01..0.01f64),
            d in 1e-5..1e-3f64,
        ) {
            let (v0, v1) = (Point3::from(a), Point3::from(b));
            let u = v1 - v0;
            prop_assume!(u.norm() > 1e-4);
            let c = segment_covariance(&v0, &v1, d).unwrap();
            let tl = 0.5 * u.norm();
            let td = 0.5 * d;
            prop_assert!((c.trace() - (tl * tl + 2.0 * td * td)).abs() < 1e-15);
            prop_assert!(c.cholesky().is_some());
            prop_assert!((c * u - u * tl * tl).norm() <= 1e-9 * (u * tl * tl).norm());
        }

        #[test]
        fn covariance_gradient_matches_differences(
            a in prop::array::uniform3(-1.0..1.0f64),
            gs in prop::array::uniform3(-1.0..1.0f64),
            d in 0.1..1.0f64,
        ) {
            let u = Vector3::from(a);
            prop_assume!(u.norm() > 0.2);
            let g = Matrix3::new(gs[0], 0.3, -0.2, 0.3, gs[1], 0.5, -0.2, 0.5, gs[2]);
            let f = |u: Vector3<f64>, d: f64| {
                g.component_mul(&segment_covariance(&Point3::origin(), &Point3::from(u), d).unwrap()).sum()
            };
            let (du, dd) = segment_covariance_grad(&u, d, &g);
            let h = 1e-6;
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let num = (f(u + e, d) - f(u - e, d)) / (2.0 * h);
                prop_assert!((num - du[k]).abs() < 1e-6);
            }
            let num = (f(u, d + h) - f(u, d - h)) / (2.0 * h);
            prop_assert!((num - dd).abs() < 1e-6);
        }
    }
}
