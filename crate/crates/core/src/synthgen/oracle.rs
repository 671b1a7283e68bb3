//! Ground-truth orientation sampling and strand-set metrics.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::pointgrid::PointGrid;
use crate::geom::{resample_strand, to_angles, HairBBox, Strand, TriMesh, STRAND_VERTICES};
use crate::hairfield::HairField;

/// Tangent of the nearest ground-truth segment.
pub struct OrientationOracle {
    grid: PointGrid,
    tangents: Vec<Vector3<f64>>,
    radius: f64,
}

impl OrientationOracle {
    /// Samples segment midpoints; queries farther than `radius` from every
    /// midpoint return `None`.
    pub fn new(strands: &[Strand], radius: f64) -> Self {
        let mut mids = Vec::new();
        let mut tangents = Vec::new();
        for s in strands {
            for w in s.vertices.windows(2) {
                let Some(t) = (w[1] - w[0]).try_normalize(1e-15) else { continue };
                mids.push(nalgebra::center(&w[0], &w[1]));
                tangents.push(t);
            }
        }
        Self {
            grid: PointGrid::new(mids, radius.max(1e-4)),
            tangents,
            radius,
        }
    }

    pub fn sample(&self, p: &Point3<f64>) -> Option<Vector3<f64>> {
        self.grid.nearest_within(p, self.radius).map(|(_, i)| self.tangents[i])
    }
}

/// Voxelized ground truth: hair voxels within `radius` of a strand carry
/// its tangent; voxels inside the head are body.
pub fn ground_truth_field(strands: &[Strand], head: &TriMesh, bbox: HairBBox, dims: [usize; 3], radius: f64) -> HairField {
    let oracle = OrientationOracle::new(strands, radius);
    let mut f = HairField::new(dims, bbox);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let c = f.voxel_center(i, j, k);
                let idx = f.index(i, j, k);
                if let Some(t) = oracle.sample(&c) {
                    let (th, ph) = to_angles(&t);
                    f.sigma[idx] = 1.0;
                    f.rho_h[idx] = 1.0;
                    f.theta[idx] = th;
                    f.phi[idx] = ph;
                } else if head.contains(&c) {
                    f.sigma[idx] = 1.0;
                    f.rho_b[idx] = 1.0;
                }
            }
        }
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrandMetrics {
    /// Mean of the two directed mean closest-vertex distances (m).
    pub mean_distance: f64,
    pub reconstructed_to_gt: f64,
    pub gt_to_reconstructed: f64,
    /// Fraction of ground-truth vertices within the coverage radius.
    pub coverage: f64,
    /// Mean undirected angle between matched tangents, degrees.
    pub orientation_error_deg: f64,
}

/// Default radius for the coverage fraction (m).
pub const COVERAGE_RADIUS: f64 = 1e-3;

struct VertexSet {
    grid: PointGrid,
    tangents: Vec<Vector3<f64>>,
}

impl VertexSet {
    fn new(strands: &[Strand]) -> Self {
        let mut points = Vec::new();
        let mut tangents = Vec::new();
        for s in strands {
            let s = if s.len() == STRAND_VERTICES { s.clone() } else { resample_strand(s, STRAND_VERTICES).unwrap_or_else(|_| s.clone()) };
            let v = &s.vertices;
            for i in 0..v.len() {
                let (a, b) = (v[i.saturating_sub(1)], v[(i + 1).min(v.len() - 1)]);
                points.push(v[i]);
                tangents.push((b - a).try_normalize(1e-15).unwrap_or_else(Vector3::zeros));
            }
        }
        Self {
            grid: PointGrid::new(points, 2e-3),
            tangents,
        }
    }

    fn nearest(&self, p: &Point3<f64>) -> (f64, usize) {
        self.grid.nearest(p).expect("non-empty set")
    }
}

/// Compares two strand sets vertex by vertex (after resampling to 100).
pub fn metric_strand_distance(reconstructed: &[Strand], gt: &[Strand], coverage_radius: f64) -> StrandMetrics {
    let r = VertexSet::new(reconstructed);
    let g = VertexSet::new(gt);
    if r.grid.is_empty() || g.grid.is_empty() {
        let same = r.grid.is_empty() && g.grid.is_empty();
        return StrandMetrics {
            mean_distance: if same { 0.0 } else { f64::INFINITY },
            reconstructed_to_gt: if same { 0.0 } else { f64::INFINITY },
            gt_to_reconstructed: if same { 0.0 } else { f64::INFINITY },
            coverage: if same { 1.0 } else { 0.0 },
            orientation_error_deg: if same { 0.0 } else { 90.0 },
        };
    }
    let mut r2g = 0.0;
    let mut angle = 0.0;
    for (i, t) in r.tangents.iter().enumerate() {
        let p = r.grid.point(i);
        let (d, j) = g.nearest(p);
        r2g += d;
        angle += t.dot(&g.tangents[j]).abs().min(1.0).acos();
    }
    let mut g2r = 0.0;
    let mut covered = 0usize;
    for i in 0..g.grid.len() {
        let p = g.grid.point(i);
        let (d, _) = r.nearest(p);
        g2r += d;
        covered += usize::from(d <= coverage_radius);
    }
    let (nr, ng) = (r.grid.len() as f64, g.grid.len() as f64);
    StrandMetrics {
        mean_distance: 0.5 * (r2g / nr + g2r / ng),
        reconstructed_to_gt: r2g / nr,
        gt_to_reconstructed: g2r / ng,
        coverage: covered as f64 / ng,
        orientation_error_deg: (angle / nr).to_degrees(),
    }
}

/// Overall style statistics: mean arc length (m) and mean curvature
/// (rad/m).
pub fn style_metrics(strands: &[Strand]) -> (f64, f64) {
    if strands.is_empty() {
        return (0.0, 0.0);
    }
    let n = strands.len() as f64;
    (
        strands.iter().map(|s| s.arc_length()).sum::<f64>() / n,
        strands.iter().map(|s| s.mean_curvature()).sum::<f64>() / n,
    )
}
