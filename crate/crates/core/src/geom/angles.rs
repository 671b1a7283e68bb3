//! Undirected 3D orientations as polar angle pairs on the hemisphere
//! `(θ, φ) ∈ (0, π]²`, and the 64-bin quantization shared by all histograms.

use std::f64::consts::PI;

use nalgebra::Vector3;

pub const ORIENTATION_BINS: usize = 64;

/// Width of one angular bin in radians.
pub fn bin_width(bins: usize) -> f64 {
    PI / bins as f64
}

/// Center of 0-based bin `i`; bin `i` covers `(iπ/B, (i+1)π/B]`.
pub fn bin_center(i: usize, bins: usize) -> f64 {
    (i as f64 + 0.5) * bin_width(bins)
}

/// Wrap an angle into `(0, π]`.
pub fn wrap_pi(a: f64) -> f64 {
    let mut r = a.rem_euclid(PI);
    if r <= 0.0 {
        r += PI;
    }
    r
}

/// 0-based bin index of an angle already folded into `(0, π]`.
pub fn angle_bin(a: f64, bins: usize) -> usize {
    let a = wrap_pi(a);
    let k = (a / bin_width(bins)).ceil() as isize - 1;
    k.clamp(0, bins as isize - 1) as usize
}

/// Unit vector of the polar pair.
pub fn direction(theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// Partial derivatives of [`direction`] with respect to θ and φ.
pub fn direction_jacobian(theta: f64, phi: f64) -> (Vector3<f64>, Vector3<f64>) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (
        Vector3::new(ct * cp, ct * sp, -st),
        Vector3::new(-st * sp, st * cp, 0.0),
    )
}

/// Polar pair of an undirected line; `d` and `-d` give the same result.
pub fn to_angles(d: &Vector3<f64>) -> (f64, f64) {
    let n = d.norm();
    if n == 0.0 {
        return (PI, PI);
    }
    let d = d / n;
    let mut theta = d.z.clamp(-1.0, 1.0).acos();
    let mut phi = d.y.atan2(d.x);
    if phi <= 0.0 {
        theta = PI - theta;
        phi += PI;
    }
    if theta <= 0.0 {
        theta = PI;
    }
    (theta, phi)
}

/// Wrap a polar pair into `(0, π]²` while keeping the undirected line it
/// encodes: a φ shift by π is paired with θ → π − θ.
pub fn wrap_pair(theta: f64, phi: f64) -> (f64, f64) {
    let turns = ((phi - PI) / PI).ceil();
    let mut theta = theta;
    let phi = phi - turns * PI;
    if (turns as i64).rem_euclid(2) == 1 {
        theta = PI - theta;
    }
    let phi = if phi <= 0.0 { phi + PI } else { phi };
    (wrap_pi(theta), phi)
}

/// Angle between two undirected lines, in radians within `[0, π/2]`.
pub fn line_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bins_cover_half_open_intervals() {
        assert_eq!(angle_bin(PI, 64), 63);
        assert_eq!(angle_bin(PI / 64.0, 64), 0);
        assert_eq!(angle_bin(PI / 64.0 + 1e-12, 64), 1);
        assert_eq!(angle_bin(0.0, 64), 63);
    }

    #[test]
    fn axis_lines_fold_onto_hemisphere() {
        let (t, p) = to_angles(&Vector3::new(1.0, 0.0, 0.0));
        assert!((t - PI / 2.0).abs() < 1e-12 && (p - PI).abs() < 1e-12);
        let (t, _) = to_angles(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(t, PI);
    }

    proptest! {
        #[test]
        fn angles_are_undirected(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
            let d = Vector3::new(x, y, z);
            prop_assume!(d.norm() > 1e-3);
            let (t, p) = to_angles(&d);
            prop_assert!(t > 0.0 && t <= PI && p > 0.0 && p <= PI);
            prop_assert!(line_angle(&direction(t, p), &d) < 1e-6);
            let (t2, p2) = to_angles(&-d);
            prop_assert!((t - t2).abs() < 1e-12 && (p - p2).abs() < 1e-12);
        }

        #[test]
        fn pair_wrap_keeps_line(t in -7.0..7.0f64, p in -7.0..7.0f64) {
            let (wt, wp) = wrap_pair(t, p);
            prop_assert!(wt > 0.0 && wt <= PI && wp > 0.0 && wp <= PI);
            prop_assert!(line_angle(&direction(wt, wp), &direction(t, p)) < 1e-6);
        }
    }
}
