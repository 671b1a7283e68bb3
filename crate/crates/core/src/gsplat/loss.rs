//! Per-strand regularizers of the refinement objective, each returning
//! its value and gradient.

use nalgebra::{DVector, Matrix3, Point3, Vector3};

use crate::geom::TriMesh;
use crate::hairfield::HairField;

/// Mean over segments of `min(|e - g|, |e + g|)` with `g` the field
/// orientation at the segment midpoint. Outside the field `g = 0`.
pub fn volume_guidance(vertices: &[Point3<f64>], field: &HairField) -> (f64, Vec<Vector3<f64>>) {
    let s = vertices.len() - 1;
    let mut grad = vec![Vector3::zeros(); vertices.len()];
    let mut total = 0.0;
    for j in 0..s {
        let u = vertices[j + 1] - vertices[j];
        let len = u.norm();
        if len <= f64::MIN_POSITIVE {
            continue;
        }
        let e = u / len;
        let mid = nalgebra::center(&vertices[j], &vertices[j + 1]);
        let Some((g, dg)) = field.orientation_with_gradient(&mid) else {
            total += 1.0;
            continue;
        };
        let sign = if (e - g).norm_squared() <= (e + g).norm_squared() { 1.0 } else { -1.0 };
        let r = e - g * sign;
        let n = r.norm();
        total += n;
        if n <= 1e-15 {
            continue;
        }
        let dr = r / n;
        let du = (Matrix3::identity() - e * e.transpose()) * dr / len;
        let dmid = dg.transpose() * (-dr * sign) * 0.5;
        grad[j] += dmid - du;
        grad[j + 1] += dmid + du;
    }
    let inv = 1.0 / s as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (total * inv, grad)
}

/// Mean over vertices of the squared distance to the inner surface,
/// counted only for vertices inside it.
pub fn penetration(vertices: &[Point3<f64>], inner: &TriMesh) -> (f64, Vec<Vector3<f64>>) {
    let inv = 1.0 / vertices.len() as f64;
    let mut total = 0.0;
    let grad = vertices
        .iter()
        .map(|v| match inner.penetration(v) {
            Some(md) => {
                let d = v - md.nearest;
                total += d.norm_squared();
                d * (2.0 * inv)
            }
            None => Vector3::zeros(),
        })
        .collect();
    (total * inv, grad)
}

/// Mean absolute segment diameter.
pub fn diameter_loss(diameters: &[f64]) -> (f64, Vec<f64>) {
    let inv = 1.0 / diameters.len() as f64;
    let value = diameters.iter().map(|d| d.abs()).sum::<f64>() * inv;
    (value, diameters.iter().map(|d| d.signum() * inv * f64::from(*d != 0.0)).collect())
}

/// L1 distance of the latent to its initial value; the subgradient is 0
/// where they coincide.
pub fn latent_loss(latent: &DVector<f64>, initial: &DVector<f64>) -> (f64, DVector<f64>) {
    let d = latent - initial;
    let g = d.map(|x| if x == 0.0 { 0.0 } else { x.signum() });
    (d.abs().sum(), g)
}

/// Mean squared deviation of body radii from their initial values.
pub fn body_radius_loss(radii: &[f64], initial: &[f64]) -> (f64, Vec<f64>) {
    let inv = 1.0 / radii.len().max(1) as f64;
    let value = radii.iter().zip(initial).map(|(w, w0)| (w - w0).powi(2)).sum::<f64>() * inv;
    (value, radii.iter().zip(initial).map(|(w, w0)| 2.0 * (w - w0) * inv).collect())
}
