//! Parting-line annotation: lifting a 2D polyline onto the scalp and
//! removing strands that grow across it near the surface.

use std::path::Path;

use nalgebra::{Point2, Point3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{Camera, Strand, TriMesh};

/// A 2D polyline drawn in one calibrated view.
#[derive(Clone, Debug, PartialEq)]
pub struct PartingLine {
    pub view: usize,
    pub points: Vec<Point2<f64>>,
}

impl PartingLine {
    /// Text form: first line the view index, then one `x y` pixel pair per
    /// line. `#` starts a comment.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (ln, first) = lines.next().ok_or("missing view index")?;
        let view = first.parse().map_err(|_| format!("line {ln}: bad view index `{first}`"))?;
        let mut points = Vec::new();
        for (ln, l) in lines {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("line {ln}: expected two numbers"))?;
            if v.len() != 2 {
                return Err(format!("line {ln}: expected two numbers"));
            }
            points.push(Point2::new(v[0], v[1]));
        }
        Ok(Self { view, points })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.view);
        for p in &self.points {
            s.push_str(&format!("{} {}\n", p.x, p.y));
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            msg,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Casts each annotated pixel onto `inner`; misses are dropped.
pub fn lift_parting_line(line: &PartingLine, camera: &Camera, inner: &TriMesh) -> Vec<Point3<f64>> {
    line.points
        .iter()
        .filter_map(|p| {
            let (o, d) = camera.pixel_ray(p.x, p.y);
            inner.raycast(&o, &d).map(|h| h.point)
        })
        .collect()
}

/// Nearest point on a polyline: (point, segment, parameter).
fn nearest_on_curve(curve: &[Point3<f64>], p: &Point3<f64>) -> (Point3<f64>, usize, f64) {
    let mut best = (curve[0], 0, 0.0, f64::INFINITY);
    for s in 0..curve.len() - 1 {
        let (a, b) = (curve[s], curve[s + 1]);
        let ab = b - a;
        let l2 = ab.norm_squared();
        let u = if l2 > 0.0 { ((p - a).dot(&ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
        let q = a + ab * u;
        let d = (p - q).norm_squared();
        if d < best.3 {
            best = (q, s, u, d);
        }
    }
    (best.0, best.1, best.2)
}

/// Signed side of `p` relative to the curtain through the curve along the
/// surface normal; `None` beyond the curve's ends or farther than `reach`.
fn side(curve: &[Point3<f64>], inner: &TriMesh, p: &Point3<f64>, reach: f64) -> Option<f64> {
    let (q, s, u) = nearest_on_curve(curve, p);
    let last = curve.len() - 2;
    if (s == 0 && u <= 0.0) || (s == last && u >= 1.0) || (p - q).norm() > reach {
        return None;
    }
    let t: Vector3<f64> = curve[s + 1] - curve[s];
    let n = inner.nearest(&q).normal;
    let v = (p - q).dot(&t.cross(&n));
    Some(v.signum())
}

/// Whether the strand passes from one side of the lifted curve to the
/// other while within `band` of the scalp surface.
pub fn crosses_parting(strand: &Strand, curve: &[Point3<f64>], inner: &TriMesh, band: f64, reach: f64) -> bool {
    if curve.len() < 2 {
        return false;
    }
    let mut prev: Option<f64> = None;
    for v in &strand.vertices {
        if inner.distance(v).distance.abs() > band {
            prev = None;
            continue;
        }
        let cur = side(curve, inner, v, reach);
        if let (Some(a), Some(b)) = (prev, cur) {
            if a * b < 0.0 {
                return true;
            }
        }
        prev = cur.or(prev);
    }
    false
}

/// Removes every strand crossing the lifted curve near the scalp.
/// Returns the survivors and the number removed.
pub fn apply_parting_line(strands: Vec<Strand>, curve: &[Point3<f64>], inner: &TriMesh, band: f64, reach: f64) -> (Vec<Strand>, usize) {
    if curve.len() < 2 {
        if !curve.is_empty() {
            log::warn!("parting line lifted to fewer than two scalp points; skipped");
        }
        return (strands, 0);
    }
    let before = strands.len();
    let kept: Vec<Strand> = strands
        .into_iter()
        .filter(|s| !crosses_parting(s, curve, inner, band, reach))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalp_and_curve() -> (TriMesh, Vec<Point3<f64>>) {
        let inner = TriMesh::icosphere(Point3::origin(), 0.1, 4);
        // Curve along the top, running in x.
        let curve: Vec<Point3<f64>> = (-5..=5)
            .map(|i| {
                let a = i as f64 * 0.06;
                Point3::new(0.1 * a.sin(), 0.0, 0.1 * a.cos())
            })
            .collect();
        (inner, curve)
    }

    fn strand_over_surface(y0: f64, y1: f64) -> Strand {
        let v = (0..20)
            .map(|i| {
                let y = y0 + (y1 - y0) * i as f64 / 19.0;
                let z = (0.1f64 * 0.1 - y * y).max(0.0).sqrt() + 0.002;
                Point3::new(0.0, y, z)
            })
            .collect();
        Strand::new(v, true)
    }

    #[test]
    fn crossing_strands_are_removed_and_others_kept() {
        let (inner, curve) = scalp_and_curve();
        let crosser = strand_over_surface(-0.02, 0.02);
        let stay = strand_over_surface(0.01, 0.04);
        let stay2 = strand_over_surface(-0.01, -0.04);
        let (kept, removed) = apply_parting_line(vec![crosser, stay.clone(), stay2.clone()], &curve, &inner, 0.005, 0.011);
        assert_eq!(removed, 1);
        assert_eq!(kept, vec![stay, stay2]);
    }

    #[test]
    fn high_crossings_do_not_count() {
        let (inner, curve) = scalp_and_curve();
        let mut s = strand_over_surface(-0.02, 0.02);
        for v in &mut s.vertices {
            v.z += 0.02;
        }
        assert!(!crosses_parting(&s, &curve, &inner, 0.005, 0.011));
    }

    #[test]
    fn empty_annotation_is_identity() {
        let (inner, _) = scalp_and_curve();
        let s = vec![strand_over_surface(-0.02, 0.02)];
        let (kept, removed) = apply_parting_line(s.clone(), &[], &inner, 0.005, 0.011);
        assert_eq!((kept, removed), (s, 0));
    }

    #[test]
    fn annotation_text_round_trip() {
        let p = PartingLine {
            view: 3,
            points: vec![Point2::new(1.5, 2.0), Point2::new(10.0, 20.25)],
        };
        assert_eq!(PartingLine::parse(&p.to_text()).unwrap(), p);
        assert!(PartingLine::parse("x\n").is_err());
        assert!(PartingLine::parse("1\n2 3 4\n").unwrap_err().contains("line 2"));
    }
}
