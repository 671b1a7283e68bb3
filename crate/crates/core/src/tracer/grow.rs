//! Forward integration of a strand through the orientation field with
//! inertia, inner-surface repulsion and health-based termination.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::TriMesh;
use crate::hairfield::HairField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    /// Growth step in meters.
    pub step_length: f64,
    pub inertia: f64,
    /// Penetration depth at which repulsion reaches full strength.
    pub penetration_depth: f64,
    pub health_budget: u32,
    pub sigma_threshold: f64,
    pub rho_threshold: f64,
    /// Step cap per tracing direction.
    pub max_steps: usize,
    pub volume_hairs: usize,
    pub scalp_hairs: usize,
    pub seed_candidates: usize,
    pub deprioritize_radius: f64,
    pub deprioritize_factor: f64,
    pub connect_neighbors: usize,
    pub connect_radius: f64,
    /// Root-end distance to the inner mesh that already counts as rooted.
    pub root_tolerance: f64,
    /// Height band above the scalp in which parting-line crossings count.
    pub parting_band: f64,
    pub min_vertices: usize,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            step_length: 0.003,
            inertia: 0.6,
            penetration_depth: 0.005,
            health_budget: 10,
            sigma_threshold: 0.05,
            rho_threshold: 0.3,
            max_steps: 200,
            volume_hairs: 2000,
            scalp_hairs: 500,
            seed_candidates: 20000,
            deprioritize_radius: 0.003,
            deprioritize_factor: 0.1,
            connect_neighbors: 5,
            connect_radius: 0.02,
            root_tolerance: 0.001,
            parting_band: 0.005,
            min_vertices: 3,
            seed: 0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia > 0.0 && self.inertia < 1.0) {
            return Err(Error::contract("inertia must lie in (0, 1)"));
        }
        if !(self.step_length > 0.0 && self.penetration_depth > 0.0) {
            return Err(Error::contract("step length and penetration depth must be positive"));
        }
        Ok(())
    }
}

/// Field and meshes a strand grows through.
#[derive(Clone, Copy)]
pub struct TraceScene<'a> {
    pub field: &'a HairField,
    pub inner: &'a TriMesh,
    pub outer: &'a TriMesh,
}

/// Unnormalized blended direction: inertia, sign-disambiguated field
/// orientation `g` and repulsion along the outward normal `n` scaled by
/// `lambda` (penetration over its threshold).
pub fn blend_direction(m_prev: &Vector3<f64>, g: &Vector3<f64>, normal: &Vector3<f64>, lambda: f64, inertia: f64) -> Vector3<f64> {
    let s = if g.dot(m_prev) < 0.0 { -1.0 } else { 1.0 };
    let push = lambda * m_prev.dot(normal).min(0.0);
    m_prev * inertia + (g * s - normal * push) * (1.0 - inertia)
}

/// One growth step from `v_prev` with unit heading `m_prev`. Returns the
/// next vertex and the normalized next heading.
pub fn grow_step(
    v_prev: &Point3<f64>,
    m_prev: &Vector3<f64>,
    field: &HairField,
    inner: &TriMesh,
    cfg: &TraceConfig,
) -> Result<(Point3<f64>, Vector3<f64>)> {
    let g = field.query(v_prev).orientation;
    let (normal, lambda) = match inner.penetration(v_prev) {
        Some(d) => (d.normal, d.distance / cfg.penetration_depth),
        None => (Vector3::zeros(), 0.0),
    };
    let m = blend_direction(m_prev, &g, &normal, lambda, cfg.inertia);
    let n = m.norm();
    if n < 1e-9 {
        return Err(Error::contract("growth direction vanished"));
    }
    let m = m / n;
    Ok((v_prev + m * cfg.step_length, m))
}

/// Whether a vertex passes the density and occupancy thresholds.
fn healthy(field: &HairField, p: &Point3<f64>, cfg: &TraceConfig) -> bool {
    let q = field.query(p);
    q.sigma >= cfg.sigma_threshold && q.rho_h >= cfg.rho_threshold
}

/// Whether a vertex sits deeper below the inner surface than the
/// repulsion threshold.
fn too_deep(p: &Point3<f64>, inner: &TriMesh, cfg: &TraceConfig) -> bool {
    inner.penetration(p).is_some_and(|d| d.distance > cfg.penetration_depth)
}

/// Grows from `start` along `dir` until health runs out, the strand leaves
/// the box or outer mesh, sinks deeper than the penetration threshold into
/// the inner mesh, or the step cap is hit. The start vertex is not
/// included; trailing unhealthy vertices are trimmed.
pub fn grow_half(scene: &TraceScene, start: &Point3<f64>, dir: &Vector3<f64>, cfg: &TraceConfig) -> Vec<Point3<f64>> {
    let mut out = Vec::new();
    let mut ok = Vec::new();
    let mut health = cfg.health_budget as i64;
    let (mut v, mut m) = (*start, dir.normalize());
    for _ in 0..cfg.max_steps {
        let Ok((nv, nm)) = grow_step(&v, &m, scene.field, scene.inner, cfg) else {
            break;
        };
        if !scene.field.bbox.contains(&nv) || !scene.outer.contains(&nv) || too_deep(&nv, scene.inner, cfg) {
            break;
        }
        let good = healthy(scene.field, &nv, cfg);
        if !good {
            health -= 1;
        }
        out.push(nv);
        ok.push(good);
        if health <= 0 {
            break;
        }
        v = nv;
        m = nm;
    }
    while ok.last() == Some(&false) {
        ok.pop();
        out.pop();
    }
    out
}

/// Bidirectional trace from a free-space seed. The returned polyline
/// starts at the end nearer to the inner mesh. Empty when both halves
/// stall immediately.
pub fn trace_strand(scene: &TraceScene, seed: &Point3<f64>, dir: &Vector3<f64>, cfg: &TraceConfig) -> Vec<Point3<f64>> {
    let fwd = grow_half(scene, seed, dir, cfg);
    let bwd = grow_half(scene, seed, &-dir, cfg);
    if fwd.is_empty() && bwd.is_empty() {
        return Vec::new();
    }
    let mut v: Vec<Point3<f64>> = bwd.into_iter().rev().collect();
    v.push(*seed);
    v.extend(fwd);
    let head = scene.inner.distance(&v[0]).distance.abs();
    let tail = scene.inner.distance(v.last().unwrap()).distance.abs();
    if tail < head {
        v.reverse();
    }
    v
}

/// Trace from a scalp point along the outward normal; root first.
pub fn trace_from_scalp(scene: &TraceScene, root: &Point3<f64>, normal: &Vector3<f64>, cfg: &TraceConfig) -> Vec<Point3<f64>> {
    let mut v = vec![*root];
    v.extend(grow_half(scene, root, normal, cfg));
    v
}
