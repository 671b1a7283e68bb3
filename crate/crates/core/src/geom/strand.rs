//! Hair strands as root-first polylines, arc-length resampling and the
//! strand file formats.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertices per strand after resampling.
pub const STRAND_VERTICES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strand {
    pub vertices: Vec<Point3<f64>>,
    pub root_on_scalp: bool,
}

impl Strand {
    pub fn new(vertices: Vec<Point3<f64>>, root_on_scalp: bool) -> Self {
        Self { vertices, root_on_scalp }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn root(&self) -> Option<&Point3<f64>> {
        self.vertices.first()
    }

    pub fn arc_length(&self) -> f64 {
        polyline_length(&self.vertices)
    }

    /// Mean turning angle per unit length (radians per meter).
    pub fn mean_curvature(&self) -> f64 {
        let v = &self.vertices;
        if v.len() < 3 {
            return 0.0;
        }
        let mut turn = 0.0;
        for w in v.windows(3) {
            let a = w[1] - w[0];
            let b = w[2] - w[1];
            let (na, nb) = (a.norm(), b.norm());
            if na > 0.0 && nb > 0.0 {
                turn += (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0).acos();
            }
        }
        let l = self.arc_length();
        if l > 0.0 {
            turn / l
        } else {
            0.0
        }
    }

    pub fn resampled(&self, n: usize) -> Result<Strand> {
        resample_strand(self, n)
    }
}

pub fn polyline_length(v: &[Point3<f64>]) -> f64 {
    v.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

fn is_uniform(v: &[Point3<f64>], tol: f64) -> bool {
    let seg: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let mean = seg.iter().sum::<f64>() / seg.len() as f64;
    mean > 0.0 && seg.iter().all(|s| (s - mean).abs() <= tol * mean)
}

/// Walks from the first vertex in steps of Euclidean length `chord`,
/// returning the `steps` intermediate points and the distance left to the
/// last vertex, or `None` when the polyline ends first.
fn chord_walk(v: &[Point3<f64>], chord: f64, steps: usize) -> Option<(Vec<Point3<f64>>, f64)> {
    let mut pts = Vec::with_capacity(steps);
    let mut p = v[0];
    let (mut seg, mut s0) = (0usize, 0.0f64);
    for _ in 0..steps {
        loop {
            if seg + 1 >= v.len() {
                return None;
            }
            let (a, b) = (v[seg], v[seg + 1]);
            let d = b - a;
            let ap = a - p;
            let qa = d.norm_squared();
            let qb = ap.dot(&d);
            let qc = ap.norm_squared() - chord * chord;
            let disc = qb * qb - qa * qc;
            if qa > 0.0 && disc >= 0.0 {
                let s = (-qb + disc.sqrt()) / qa;
                // Tolerance keeps crossings that land exactly on a vertex.
                if s >= s0 - 1e-9 && s <= 1.0 + 1e-9 {
                    let s = s.clamp(s0, 1.0);
                    p = a + d * s;
                    s0 = s;
                    break;
                }
            }
            seg += 1;
            s0 = 0.0;
        }
        pts.push(p);
    }
    Some((pts, (v[v.len() - 1] - p).norm()))
}

/// Resampling to `n` vertices with equal chord lengths and exact
/// endpoints. A strand that already has `n` vertices spaced uniformly
/// within 1% is returned unchanged, which makes resampling idempotent.
pub fn resample_strand(s: &Strand, n: usize) -> Result<Strand> {
    if n < 2 {
        return Err(Error::contract("resampling needs at least two output vertices"));
    }
    let v = &s.vertices;
    if v.len() < 2 {
        return Err(Error::DegenerateStrand);
    }
    let total = polyline_length(v);
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateStrand);
    }
    if v.len() == n && is_uniform(v, 0.01) {
        return Ok(s.clone());
    }
    let last = v[v.len() - 1];
    // Bisect the chord so the final step lands on the last vertex.
    let (mut lo, mut hi) = (0.0, total / (n - 1) as f64);
    let mut best = None;
    for _ in 0..100 {
        let c = 0.5 * (lo + hi);
        match chord_walk(v, c, n - 2) {
            Some((pts, rest)) if rest >= c => {
                lo = c;
                best = Some(pts);
            }
            _ => hi = c,
        }
        if hi - lo <= 1e-14 * total {
            break;
        }
    }
    let mut out = Vec::with_capacity(n);
    out.push(v[0]);
    match best {
        Some(pts) => out.extend(pts),
        None => {
            // Closed loops and similar pathologies: fall back to arc length.
            let mut cum = vec![0.0];
            for w in v.windows(2) {
                cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
            }
            let mut seg = 0;
            for i in 1..n - 1 {
                let target = total * i as f64 / (n - 1) as f64;
                while seg + 2 < cum.len() && cum[seg + 1] < target {
                    seg += 1;
                }
                let len = cum[seg + 1] - cum[seg];
                let t = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push(v[seg] + (v[seg + 1] - v[seg]) * t);
            }
        }
    }
    out.push(last);
    Ok(Strand::new(out, s.root_on_scalp))
}

const HAIR_MAGIC: &[u8; 4] = b"HAIR";
const HAIR_VERSION: u32 = 1;

pub fn encode_hair(strands: &[Strand]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HAIR_MAGIC);
    out.extend_from_slice(&HAIR_VERSION.to_le_bytes());
    out.extend_from_slice(&(strands.len() as u32).to_le_bytes());
    for s in strands {
        out.extend_from_slice(&(s.vertices.len() as u32).to_le_bytes());
        for v in &s.vertices {
            for c in [v.x, v.y, v.z] {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    out
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(data: &'a [u8], format: &'static str) -> Self {
        Self { data, pos: 0, format }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.format, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::format(self.format, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(self.format, "trailing bytes"));
        }
        Ok(())
    }
}

/// Decodes the strand binary. The format carries no scalp flag; strands
/// are marked rooted.
pub fn decode_hair(data: &[u8]) -> Result<Vec<Strand>> {
    let mut r = ByteReader::new(data, "HAIR");
    r.magic(HAIR_MAGIC)?;
    let version = r.u32()?;
    if version != HAIR_VERSION {
        return Err(Error::format("HAIR", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut strands = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let nv = r.u32()? as usize;
        let mut v = Vec::with_capacity(nv.min(1 << 16));
        for _ in 0..nv {
            let (x, y, z) = (r.f32()?, r.f32()?, r.f32()?);
            v.push(Point3::new(x as f64, y as f64, z as f64));
        }
        strands.push(Strand::new(v, true));
    }
    r.finish()?;
    Ok(strands)
}

pub fn write_hair(path: &Path, strands: &[Strand]) -> Result<()> {
    std::fs::write(path, encode_hair(strands))?;
    Ok(())
}

pub fn read_hair(path: &Path) -> Result<Vec<Strand>> {
    decode_hair(&std::fs::read(path)?)
}

/// OBJ polylines: one `l` record per strand.
pub fn strands_to_obj(strands: &[Strand]) -> String {
    let mut s = String::new();
    for st in strands {
        for v in &st.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x as f32, v.y as f32, v.z as f32);
        }
    }
    let mut base = 1usize;
    for st in strands {
        if st.vertices.is_empty() {
            continue;
        }
        s.push('l');
        for i in 0..st.vertices.len() {
            let _ = write!(s, " {}", base + i);
        }
        s.push('\n');
        base += st.vertices.len();
    }
    s
}

pub fn parse_obj_strands(text: &str) -> std::result::Result<Vec<Strand>, String> {
    let mut v = Vec::new();
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: std::result::Result<Vec<f64>, _> = it.take(3).map(str::parse::<f64>).collect();
                let c = c.map_err(|e| format!("line {}: {e}", ln + 1))?;
                if c.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", ln + 1));
                }
                v.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("l") => {
                let mut pts = Vec::new();
                for r in it {
                    let i: usize = r
                        .split('/')
                        .next()
                        .unwrap_or("")
                        .parse()
                        .map_err(|e| format!("line {}: {e}", ln + 1))?;
                    let p = v.get(i.wrapping_sub(1)).ok_or(format!("line {}: index {i} out of range", ln + 1))?;
                    pts.push(*p);
                }
                out.push(Strand::new(pts, true));
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn write_obj_strands(path: &Path, strands: &[Strand]) -> Result<()> {
    std::fs::write(path, strands_to_obj(strands))?;
    Ok(())
}

pub fn read_obj_strands(path: &Path) -> Result<Vec<Strand>> {
    let text = std::fs::read_to_string(path)?;
    parse_obj_strands(&text).map_err(|msg| Error::Parse {
        path: path.display().to_string(),
        msg,
    })
}

/// Rounds every coordinate through `f32`, matching what the binary format
/// stores.
pub fn quantize_f32(strands: &[Strand]) -> Vec<Strand> {
    strands
        .iter()
        .map(|s| {
            Strand::new(
                s.vertices
                    .iter()
                    .map(|p| p.map(|c| c as f32 as f64))
                    .collect(),
                s.root_on_scalp,
            )
        })
        .collect()
}
