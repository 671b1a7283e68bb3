//! Uniform hash grid for nearest-point queries over static point sets.

use std::collections::HashMap;

use nalgebra::Point3;

pub struct PointGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    points: Vec<Point3<f64>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl PointGrid {
    pub fn new(points: Vec<Point3<f64>>, cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i as u32);
        }
        Self { cell, cells, points, lo, hi }
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

    pub fn point(&self, i: usize) -> &Point3<f64> {
        &self.points[i]
    }

    /// Nearest point as (distance, index); ties go to the lower index.
    pub fn nearest(&self, p: &Point3<f64>) -> Option<(f64, usize)> {
        if self.points.is_empty() {
            return None;
        }
        let k = Self::key(p, self.cell);
        // Rings beyond this cannot hold any point.
        let reach = (0..3).map(|a| (k[a] - self.lo[a]).abs().max((self.hi[a] - k[a]).abs())).max().unwrap_or(0);
        let mut best: Option<(f64, usize)> = None;
        let consider = |i: usize, d: f64, best: &mut Option<(f64, usize)>| {
            if best.map_or(true, |(bd, bi)| d < bd || (d == bd && i < bi)) {
                *best = Some((d, i));
            }
        };
        for r in 0..=reach {
            // Once a shell outgrows the occupied cells a plain scan is cheaper.
            if 24 * r * r > self.cells.len() as i64 {
                for (i, q) in self.points.iter().enumerate() {
                    consider(i, (q - p).norm(), &mut best);
                }
                return best;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    let side = dx.abs() == r || dy.abs() == r;
                    let step = if side || r == 0 { 1 } else { 2 * r as usize };
                    for dz in (-r..=r).step_by(step.max(1)) {
                        let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                        for &i in ids {
                            consider(i as usize, (self.points[i as usize] - p).norm(), &mut best);
                        }
                    }
                }
            }
            // Points outside ring r are farther than r cells away.
            if let Some((d, _)) = best {
                if d <= r as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }

    /// Nearest point within `radius`.
    pub fn nearest_within(&self, p: &Point3<f64>, radius: f64) -> Option<(f64, usize)> {
        let k = Self::key(p, self.cell);
        let reach = (radius / self.cell).ceil() as i64;
        let mut best: Option<(f64, usize)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                    for &i in ids {
                        let d = (self.points[i as usize] - p).norm();
                        let i = i as usize;
                        if d <= radius && best.map_or(true, |(bd, bi)| d < bd || (d == bd && i < bi)) {
                            best = Some((d, i));
                        }
                    }
                }
            }
        }
        best
    }
}
