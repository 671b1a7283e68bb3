//! Orientation and occupancy supervision terms with their gradients.

use crate::error::{Error, Result};
use crate::geom::OrientationHistogram2D;

/// Mean squared bin difference between two normalized distributions.
pub fn orientation_loss(rendered: &OrientationHistogram2D, reference: &OrientationHistogram2D) -> Result<f64> {
    rendered.check_normalized()?;
    reference.check_normalized()?;
    if rendered.bins() != reference.bins() {
        return Err(Error::contract("histogram bin counts differ"));
    }
    let n = rendered.bins() as f64;
    Ok(rendered
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Loss and gradient with respect to the unnormalized projected values
/// (`f = raw / Σ raw`). Returns `None` when `raw` has no mass.
pub fn orientation_loss_raw(raw: &[f64], reference: &[f64]) -> Option<(f64, Vec<f64>)> {
    let z: f64 = raw.iter().sum();
    if !(z > 0.0) {
        return None;
    }
    let n = raw.len() as f64;
    let f: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let mut loss = 0.0;
    let df: Vec<f64> = f
        .iter()
        .zip(reference)
        .map(|(a, b)| {
            loss += (a - b) * (a - b);
            2.0 * (a - b) / n
        })
        .collect();
    let dot: f64 = df.iter().zip(&f).map(|(a, b)| a * b).sum();
    Some((loss / n, df.iter().map(|d| (d - dot) / z).collect()))
}

/// Circular Gaussian blur over orientation bins, standing in for the
/// angular spread a filter bank puts on a single line.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseBlur {
    taps: Vec<f64>,
}

impl ResponseBlur {
    /// `sigma_bins <= 0` gives the identity.
    pub fn new(bins: usize, sigma_bins: f64) -> Self {
        let mut taps = vec![0.0; bins];
        if sigma_bins > 0.0 {
            for (k, t) in taps.iter_mut().enumerate() {
                let d = k.min(bins - k) as f64;
                *t = (-0.5 * (d / sigma_bins).powi(2)).exp();
            }
            let z: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= z);
        } else if bins > 0 {
            taps[0] = 1.0;
        }
        Self { taps }
    }

    pub fn is_identity(&self) -> bool {
        self.taps.iter().skip(1).all(|&t| t == 0.0)
    }

    /// Symmetric taps, so this is also its own adjoint.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let n = self.taps.len();
        assert_eq!(values.len(), n, "blur size mismatch");
        if self.is_identity() {
            return values.to_vec();
        }
        (0..n)
            .map(|i| (0..n).map(|j| values[j] * self.taps[(i + n - j) % n]).sum())
            .collect()
    }
}

/// Per-pixel occupancy loss against several pseudo ground-truth sources;
/// each label keeps the source closest to the prediction.
pub fn occupancy_loss(pred: (f64, f64), refs: &[(f64, f64)]) -> f64 {
    occupancy_loss_grad(pred, refs).0
}

/// Loss plus gradients with respect to `(ψ_h, ψ_b)`.
pub fn occupancy_loss_grad(pred: (f64, f64), refs: &[(f64, f64)]) -> (f64, f64, f64) {
    assert!(!refs.is_empty(), "occupancy loss needs at least one reference");
    let best = |get: fn(&(f64, f64)) -> f64, p: f64| {
        refs.iter()
            .map(|r| p - get(r))
            .fold(None, |acc: Option<f64>, d| match acc {
                Some(a) if a * a <= d * d => Some(a),
                _ => Some(d),
            })
            .unwrap()
    };
    let dh = best(|r| r.0, pred.0);
    let db = best(|r| r.1, pred.1);
    (dh * dh + db * db, 2.0 * dh, 2.0 * db)
}
