//! Bridging free-floating volume hairs to the scalp along nearby scalp
//! hairs.

use std::collections::HashMap;

use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grow::TraceConfig;
use crate::geom::{resample_strand, Strand, TriMesh, STRAND_VERTICES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectStats {
    pub volume_hairs: usize,
    pub already_rooted: usize,
    pub connected: usize,
    pub discarded: usize,
    pub connection_rate: f64,
}

/// Spatial hash over scalp-hair vertices.
struct VertexIndex {
    cell: f64,
    grid: HashMap<[i64; 3], Vec<(u32, u32)>>,
}

impl VertexIndex {
    fn new(hairs: &[Vec<Point3<f64>>], cell: f64) -> Self {
        let mut grid: HashMap<[i64; 3], Vec<(u32, u32)>> = HashMap::new();
        for (h, v) in hairs.iter().enumerate() {
            for (k, p) in v.iter().enumerate() {
                grid.entry(Self::key(p, cell)).or_default().push((h as u32, k as u32));
            }
        }
        Self { cell, grid }
    }

    fn key(p: &Point3<f64>, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Per scalp hair within `radius`: (distance, hair, nearest vertex),
    /// sorted by distance then hair index.
    fn near(&self, hairs: &[Vec<Point3<f64>>], p: &Point3<f64>, radius: f64) -> Vec<(f64, usize, usize)> {
        let k = Self::key(p, self.cell);
        let reach = (radius / self.cell).ceil() as i64;
        let mut best: HashMap<usize, (f64, usize)> = HashMap::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(ids) = self.grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                    for &(h, v) in ids {
                        let d = (hairs[h as usize][v as usize] - p).norm();
                        if d <= radius {
                            let e = best.entry(h as usize).or_insert((d, v as usize));
                            if d < e.0 || (d == e.0 && (v as usize) < e.1) {
                                *e = (d, v as usize);
                            }
                        }
                    }
                }
            }
        }
        let mut out: Vec<(f64, usize, usize)> = best.into_iter().map(|(h, (d, v))| (d, h, v)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }
}

/// Polyline from the scalp root of `guide` up to its vertex `upto`, then
/// straight toward `target` in steps of at most `step`.
fn bridge(guide: &[Point3<f64>], upto: usize, target: &Point3<f64>, step: f64) -> Vec<Point3<f64>> {
    let mut path: Vec<Point3<f64>> = guide[..=upto].to_vec();
    let from = guide[upto];
    let gap = (target - from).norm();
    let n = (gap / step).ceil() as usize;
    for i in 1..n {
        path.push(from + (target - from) * (i as f64 / n as f64));
    }
    path
}

/// Roots every volume hair on the scalp by walking its root end to one of
/// the `k` nearest scalp hairs (random choice) and following that hair
/// down. Returns scalp-rooted strands resampled to [`STRAND_VERTICES`]:
/// connected volume hairs followed by the scalp hairs themselves.
pub fn connect_to_scalp<R: Rng>(
    volume: &[Vec<Point3<f64>>],
    scalp: &[Vec<Point3<f64>>],
    inner: &TriMesh,
    cfg: &TraceConfig,
    rng: &mut R,
) -> (Vec<Strand>, ConnectStats) {
    let mut stats = ConnectStats {
        volume_hairs: volume.len(),
        ..Default::default()
    };
    let index = VertexIndex::new(scalp, cfg.connect_radius.max(1e-6));
    let mut out = Vec::with_capacity(volume.len() + scalp.len());
    for v in volume {
        if v.len() < 2 {
            stats.discarded += 1;
            continue;
        }
        let root = v[0];
        let joined = if inner.distance(&root).distance.abs() <= cfg.root_tolerance {
            stats.already_rooted += 1;
            v.clone()
        } else {
            let near = index.near(scalp, &root, cfg.connect_radius);
            let pick = &near[..near.len().min(cfg.connect_neighbors)];
            let Some(&(_, h, k)) = pick.choose(rng) else {
                stats.discarded += 1;
                continue;
            };
            let mut path = bridge(&scalp[h], k, &root, cfg.step_length);
            path.extend_from_slice(v);
            path
        };
        match resample_strand(&Strand::new(joined, true), STRAND_VERTICES) {
            Ok(s) => {
                stats.connected += 1;
                out.push(s);
            }
            Err(_) => stats.discarded += 1,
        }
    }
    for s in scalp {
        if s.len() >= 2 {
            if let Ok(r) = resample_strand(&Strand::new(s.clone(), true), STRAND_VERTICES) {
                out.push(r);
            }
        }
    }
    stats.connection_rate = if volume.is_empty() { 1.0 } else { stats.connected as f64 / volume.len() as f64 };
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(a: Point3<f64>, b: Point3<f64>, n: usize) -> Vec<Point3<f64>> {
        (0..n).map(|i| a + (b - a) * (i as f64 / (n - 1) as f64)).collect()
    }

    #[test]
    fn rooted_hair_is_only_resampled() {
        let inner = TriMesh::icosphere(Point3::origin(), 0.1, 3);
        let root = inner.nearest(&Point3::new(0.0, 0.0, 0.2)).nearest;
        let v = line(root, root + nalgebra::Vector3::new(0.0, 0.0, 0.05), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, st) = connect_to_scalp(&[v.clone()], &[], &inner, &TraceConfig::default(), &mut rng);
        assert_eq!(st.already_rooted, 1);
        assert_eq!(s[0].len(), 100);
        assert_eq!(s[0].vertices[0], v[0]);
        assert_eq!(*s[0].vertices.last().unwrap(), *v.last().unwrap());
    }

    #[test]
    fn floating_hair_is_bridged_to_a_scalp_root() {
        let inner = TriMesh::icosphere(Point3::origin(), 0.1, 3);
        let sroot = inner.nearest(&Point3::new(0.0, 0.0, 0.2)).nearest;
        let scalp = vec![line(sroot, Point3::new(0.0, 0.0, 0.16), 20)];
        let vol = vec![line(Point3::new(0.005, 0.0, 0.15), Point3::new(0.03, 0.0, 0.2), 15)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, st) = connect_to_scalp(&vol, &scalp, &inner, &TraceConfig::default(), &mut rng);
        assert_eq!(st.connected, 1);
        assert_eq!(s.len(), 2);
        assert!(inner.distance(&s[0].vertices[0]).distance.abs() < 1e-3);
        assert!(s.iter().all(|x| x.len() == 100 && x.root_on_scalp));
    }

    #[test]
    fn hair_far_from_scalp_hairs_is_discarded() {
        let inner = TriMesh::icosphere(Point3::origin(), 0.1, 2);
        let sroot = inner.nearest(&Point3::new(0.0, 0.0, 0.2)).nearest;
        let scalp = vec![line(sroot, Point3::new(0.0, 0.0, 0.12), 5)];
        let vol = vec![line(Point3::new(0.0, 0.2, 0.0), Point3::new(0.0, 0.3, 0.0), 5)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, st) = connect_to_scalp(&vol, &scalp, &inner, &TraceConfig::default(), &mut rng);
        assert_eq!(st.discarded, 1);
        assert_eq!(st.connection_rate, 0.0);
    }
}
