//! Seed candidates ordered by σ·ρ_h with proximity deprioritization.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::Point3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{HairBBox, TriMesh};
use crate::hairfield::HairField;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    priority: f64,
    id: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority).then(other.id.cmp(&self.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Max-priority queue of seed points. Stale heap entries are skipped on
/// pop, so priorities can be lowered in place.
#[derive(Clone, Debug)]
pub struct SeedQueue {
    points: Vec<Point3<f64>>,
    priority: Vec<f64>,
    taken: Vec<bool>,
    heap: BinaryHeap<Entry>,
    cell: f64,
    grid: HashMap<[i64; 3], Vec<u32>>,
}

impl SeedQueue {
    /// `cell` is the spatial hash size used by [`SeedQueue::deprioritize_near`].
    pub fn new(points: Vec<Point3<f64>>, priority: Vec<f64>, cell: f64) -> Self {
        assert_eq!(points.len(), priority.len());
        let cell = cell.max(1e-9);
        let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            grid.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        let heap = priority
            .iter()
            .enumerate()
            .map(|(i, &p)| Entry { priority: p, id: i as u32 })
            .collect();
        let taken = vec![false; points.len()];
        Self {
            points,
            priority,
            taken,
            heap,
            cell,
            grid,
        }
    }

    fn key(p: &Point3<f64>, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> Point3<f64> {
        self.points[id]
    }

    pub fn priority(&self, id: usize) -> f64 {
        self.priority[id]
    }

    /// Highest-priority remaining seed as `(id, point, priority)`.
    pub fn pop(&mut self) -> Option<(usize, Point3<f64>, f64)> {
        while let Some(e) = self.heap.pop() {
            let i = e.id as usize;
            if self.taken[i] || e.priority != self.priority[i] {
                continue;
            }
            self.taken[i] = true;
            return Some((i, self.points[i], e.priority));
        }
        None
    }

    /// Multiplies the priority of every remaining seed within `radius` of
    /// any of `points` by `factor`, once per call.
    pub fn deprioritize_near(&mut self, points: &[Point3<f64>], radius: f64, factor: f64) {
        let reach = (radius / self.cell).ceil() as i64;
        let r2 = radius * radius;
        let mut hit: Vec<u32> = Vec::new();
        for p in points {
            let k = Self::key(p, self.cell);
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    for dz in -reach..=reach {
                        let Some(ids) = self.grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                        for &id in ids {
                            if !self.taken[id as usize] && (self.points[id as usize] - p).norm_squared() <= r2 {
                                hit.push(id);
                            }
                        }
                    }
                }
            }
        }
        hit.sort_unstable();
        hit.dedup();
        for id in hit {
            let i = id as usize;
            self.priority[i] *= factor;
            self.heap.push(Entry { priority: self.priority[i], id });
        }
    }
}

/// `n` uniform samples in `bbox` that lie inside `outer` and outside
/// `inner`, prioritized by σ·ρ_h.
pub fn sample_seeds<R: Rng>(
    field: &HairField,
    inner: &TriMesh,
    outer: &TriMesh,
    bbox: &HairBBox,
    n: usize,
    cell: f64,
    rng: &mut R,
) -> Result<SeedQueue> {
    let mut points = Vec::with_capacity(n);
    let max_attempts = 50 * n.max(1) + 1000;
    let mut attempts = 0;
    while points.len() < n && attempts < max_attempts {
        attempts += 1;
        let p = Point3::new(
            rng.gen_range(bbox.min.x..bbox.max.x),
            rng.gen_range(bbox.min.y..bbox.max.y),
            rng.gen_range(bbox.min.z..bbox.max.z),
        );
        if outer.contains(&p) && !inner.contains(&p) {
            points.push(p);
        }
    }
    if points.is_empty() && n > 0 {
        return Err(Error::NoAdmissibleVolume);
    }
    let priority = points
        .iter()
        .map(|p| {
            let q = field.query(p);
            q.sigma * q.rho_h
        })
        .collect();
    Ok(SeedQueue::new(points, priority, cell))
}
