//! Triangle meshes: OBJ subset I/O, nearest-point and ray queries over a
//! bounding-volume hierarchy, and winding-number inside tests.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Vec<Vector3<f64>>,
    bvh: Bvh,
    watertight: bool,
    /// Angle-weighted vertex normals and summed edge normals for sign tests.
    vertex_pseudo: Vec<Vector3<f64>>,
    edge_pseudo: HashMap<(u32, u32), Vector3<f64>>,
}

/// Result of a nearest-point query.
#[derive(Clone, Copy, Debug)]
pub struct MeshDistance {
    /// Negative inside the mesh (signed queries only).
    pub distance: f64,
    pub nearest: Point3<f64>,
    /// Interpolated vertex normal at the nearest point.
    pub normal: Vector3<f64>,
    pub triangle: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RayHit {
    pub t: f64,
    pub triangle: usize,
    pub point: Point3<f64>,
}

impl TriMesh {
    /// Builds a mesh; normals are recomputed (area-weighted) when `normals`
    /// is empty.
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[u32; 3]>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        let n = vertices.len() as u32;
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::contract("triangle index out of range"));
        }
        let normals = if normals.is_empty() {
            vertex_normals(&vertices, &triangles)
        } else {
            if normals.len() != vertices.len() {
                return Err(Error::contract("one normal per vertex required"));
            }
            normals
                .into_iter()
                .map(|v| {
                    let l = v.norm();
                    if l > 0.0 {
                        v / l
                    } else {
                        Vector3::z()
                    }
                })
                .collect()
        };
        let watertight = is_closed_manifold(&triangles);
        let bvh = Bvh::build(&vertices, &triangles);
        let (vertex_pseudo, edge_pseudo) = pseudo_normals(&vertices, &triangles);
        Ok(Self {
            vertices,
            triangles,
            normals,
            bvh,
            watertight,
            vertex_pseudo,
            edge_pseudo,
        })
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    pub fn triangle(&self, t: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Generalized winding number; ≈1 inside a closed outward-oriented mesh.
    pub fn winding_number(&self, p: &Point3<f64>) -> f64 {
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            total += solid_angle(&(a - p), &(b - p), &(c - p));
        }
        total / (4.0 * PI)
    }

    /// Inside test: pseudo-normal sign at the nearest feature for closed
    /// meshes, winding number otherwise. Surface points count as inside.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        if !self.watertight {
            return self.winding_number(p) > 0.5;
        }
        let (tri, q, bary, d2) = self.bvh.nearest(self, p);
        if tri == usize::MAX {
            return false;
        }
        if d2 == 0.0 {
            return true;
        }
        (p - q).dot(&self.feature_normal(tri, bary)) < 0.0
    }

    fn feature_normal(&self, tri: usize, bary: [f64; 3]) -> Vector3<f64> {
        const EPS: f64 = 1e-9;
        let idx = self.triangles[tri];
        let zero: Vec<usize> = (0..3).filter(|&k| bary[k] <= EPS).collect();
        match zero.len() {
            0 => self.face_normal(tri),
            1 => {
                let (a, b) = (idx[(zero[0] + 1) % 3], idx[(zero[0] + 2) % 3]);
                self.edge_pseudo[&(a.min(b), a.max(b))]
            }
            _ => {
                let k = (0..3).find(|k| !zero.contains(k)).unwrap_or(0);
                self.vertex_pseudo[idx[k] as usize]
            }
        }
    }

    /// Unsigned nearest-point query.
    pub fn nearest(&self, p: &Point3<f64>) -> MeshDistance {
        let (tri, q, bary, d2) = self.bvh.nearest(self, p);
        let [a, b, c] = self.triangles[tri];
        let n = self.normals[a as usize] * bary[0]
            + self.normals[b as usize] * bary[1]
            + self.normals[c as usize] * bary[2];
        let n = if n.norm() > 1e-12 { n.normalize() } else { self.face_normal(tri) };
        MeshDistance {
            distance: d2.sqrt(),
            nearest: q,
            normal: n,
            triangle: tri,
        }
    }

    /// Signed distance (negative inside). Requires a watertight mesh.
    pub fn signed_distance(&self, p: &Point3<f64>) -> Result<MeshDistance> {
        if !self.watertight {
            return Err(Error::contract("signed distance requested on a non-watertight mesh"));
        }
        let mut d = self.nearest(p);
        if self.contains(p) {
            d.distance = -d.distance;
        }
        Ok(d)
    }

    /// Signed distance when possible, unsigned otherwise.
    pub fn distance(&self, p: &Point3<f64>) -> MeshDistance {
        self.signed_distance(p).unwrap_or_else(|_| self.nearest(p))
    }

    /// Depth of `p` below the surface (0 outside).
    pub fn penetration(&self, p: &Point3<f64>) -> Option<MeshDistance> {
        if self.watertight && self.contains(p) {
            Some(self.nearest(p))
        } else {
            None
        }
    }

    /// First intersection along `origin + t·dir`, `t > 0`.
    pub fn raycast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        self.bvh.raycast(self, origin, dir)
    }

    /// Copy with every vertex pushed along its normal.
    pub fn offset(&self, distance: f64) -> Result<TriMesh> {
        let v = self
            .vertices
            .iter()
            .zip(&self.normals)
            .map(|(p, n)| p + n * distance)
            .collect();
        TriMesh::new(v, self.triangles.clone(), self.normals.clone())
    }

    /// Mean length of edges incident to each vertex.
    pub fn mean_incident_edge_length(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.vertices.len()];
        let mut cnt = vec![0usize; self.vertices.len()];
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k] as usize, tri[(k + 1) % 3] as usize);
                let l = (self.vertices[a] - self.vertices[b]).norm();
                sum[a] += l;
                sum[b] += l;
                cnt[a] += 1;
                cnt[b] += 1;
            }
        }
        sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
        }
        for n in &self.normals {
            let _ = writeln!(s, "vn {:?} {:?} {:?}", n.x, n.y, n.z);
        }
        for t in &self.triangles {
            let _ = writeln!(
                s,
                "f {a}//{a} {b}//{b} {c}//{c}",
                a = t[0] + 1,
                b = t[1] + 1,
                c = t[2] + 1
            );
        }
        s
    }

    pub fn parse_obj(text: &str) -> std::result::Result<TriMesh, String> {
        let mut v = Vec::new();
        let mut vn = Vec::new();
        let mut f: Vec<[u32; 3]> = Vec::new();
        let mut fn_idx: Vec<[Option<u32>; 3]> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            let mut it = line.split_whitespace();
            let num = |s: Option<&str>| -> std::result::Result<f64, String> {
                s.ok_or(format!("line {}: missing value", ln + 1))?
                    .parse()
                    .map_err(|e| format!("line {}: {e}", ln + 1))
            };
            match it.next() {
                Some("v") => v.push(Point3::new(num(it.next())?, num(it.next())?, num(it.next())?)),
                Some("vn") => vn.push(Vector3::new(num(it.next())?, num(it.next())?, num(it.next())?)),
                Some("f") => {
                    let refs: Vec<&str> = it.collect();
                    if refs.len() < 3 {
                        return Err(format!("line {}: face with fewer than 3 vertices", ln + 1));
                    }
                    let parse_ref = |r: &str| -> std::result::Result<(u32, Option<u32>), String> {
                        let mut parts = r.split('/');
                        let vi: i64 = parts
                            .next()
                            .unwrap_or("")
                            .parse()
                            .map_err(|e| format!("line {}: bad face index '{r}': {e}", ln + 1))?;
                        let _vt = parts.next();
                        let ni = parts.next().filter(|s| !s.is_empty()).map(|s| s.parse::<i64>());
                        let resolve = |i: i64, n: usize| -> std::result::Result<u32, String> {
                            let k = if i < 0 { n as i64 + i } else { i - 1 };
                            if k < 0 {
                                return Err(format!("line {}: face index {i} out of range", ln + 1));
                            }
                            Ok(k as u32)
                        };
                        let vi = resolve(vi, v.len())?;
                        let ni = match ni {
                            Some(Ok(n)) => Some(resolve(n, vn.len())?),
                            Some(Err(e)) => return Err(format!("line {}: {e}", ln + 1)),
                            None => None,
                        };
                        Ok((vi, ni))
                    };
                    let parsed: std::result::Result<Vec<_>, _> = refs.iter().map(|r| parse_ref(r)).collect();
                    let parsed = parsed?;
                    for k in 1..parsed.len() - 1 {
                        f.push([parsed[0].0, parsed[k].0, parsed[k + 1].0]);
                        fn_idx.push([parsed[0].1, parsed[k].1, parsed[k + 1].1]);
                    }
                }
                _ => {}
            }
        }
        // Per-vertex normals only when the file pairs each vertex with a
        // consistent normal index.
        let mut normals = Vec::new();
        if !vn.is_empty() {
            let mut map = vec![None; v.len()];
            let mut consistent = true;
            for (tri, ns) in f.iter().zip(&fn_idx) {
                for k in 0..3 {
                    match ns[k] {
                        Some(n) if (n as usize) < vn.len() => {
                            let slot = &mut map[tri[k] as usize];
                            match slot {
                                None => *slot = Some(n),
                                Some(prev) if *prev != n && vn[*prev as usize] != vn[n as usize] => consistent = false,
                                _ => {}
                            }
                        }
                        _ => consistent = false,
                    }
                }
            }
            if consistent && map.iter().all(Option::is_some) {
                normals = map.into_iter().map(|n| vn[n.unwrap() as usize]).collect();
            }
        }
        TriMesh::new(v, f, normals).map_err(|e| e.to_string())
    }

    pub fn read_obj(path: &Path) -> Result<TriMesh> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_obj(&text).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            msg,
        })
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// Subdivided icosahedron projected onto a sphere. Outward-oriented and
    /// watertight.
    pub fn icosphere(center: Point3<f64>, radius: f64, subdivisions: usize) -> TriMesh {
        Self::ellipsoid(center, Vector3::repeat(radius), subdivisions)
    }

    pub fn ellipsoid(center: Point3<f64>, radii: Vector3<f64>, subdivisions: usize) -> TriMesh {
        let (dirs, tris) = unit_icosphere(subdivisions);
        let vertices = dirs
            .iter()
            .map(|d| center + Vector3::new(d.x * radii.x, d.y * radii.y, d.z * radii.z))
            .collect();
        let normals = dirs
            .iter()
            .map(|d| Vector3::new(d.x / radii.x, d.y / radii.y, d.z / radii.z).normalize())
            .collect();
        TriMesh::new(vertices, tris, normals).expect("icosphere indices are valid")
    }
}

fn vertex_normals(v: &[Point3<f64>], t: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut n = vec![Vector3::zeros(); v.len()];
    for tri in t {
        let [a, b, c] = tri.map(|i| v[i as usize]);
        let fnrm = (b - a).cross(&(c - a));
        for &i in tri {
            n[i as usize] += fnrm;
        }
    }
    n.into_iter()
        .map(|x| if x.norm() > 0.0 { x.normalize() } else { Vector3::z() })
        .collect()
}

type PseudoNormals = (Vec<Vector3<f64>>, HashMap<(u32, u32), Vector3<f64>>);

fn pseudo_normals(v: &[Point3<f64>], t: &[[u32; 3]]) -> PseudoNormals {
    let mut vn = vec![Vector3::zeros(); v.len()];
    let mut en: HashMap<(u32, u32), Vector3<f64>> = HashMap::new();
    for tri in t {
        let p = tri.map(|i| v[i as usize]);
        let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
        if n.norm() == 0.0 {
            continue;
        }
        let n = n.normalize();
        for k in 0..3 {
            let (e1, e2) = (p[(k + 1) % 3] - p[k], p[(k + 2) % 3] - p[k]);
            let cos = (e1.dot(&e2) / (e1.norm() * e2.norm())).clamp(-1.0, 1.0);
            vn[tri[k] as usize] += n * cos.acos();
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            *en.entry((a.min(b), a.max(b))).or_insert_with(Vector3::zeros) += n;
        }
    }
    (vn, en)
}

fn is_closed_manifold(t: &[[u32; 3]]) -> bool {
    if t.is_empty() {
        return false;
    }
    let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
    for tri in t {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            *edges.entry((a, b)).or_default() += 1;
        }
    }
    edges.iter().all(|(&(a, b), &c)| c == 1 && edges.get(&(b, a)) == Some(&1))
}

/// Signed solid angle of a triangle seen from the origin (Van Oosterom–Strackee).
fn solid_angle(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
    let num = a.dot(&b.cross(c));
    let den = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
    2.0 * num.atan2(den)
}

fn unit_icosphere(subdivisions: usize) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let g = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        (-1.0, g, 0.0),
        (1.0, g, 0.0),
        (-1.0, -g, 0.0),
        (1.0, -g, 0.0),
        (0.0, -1.0, g),
        (0.0, 1.0, g),
        (0.0, -1.0, -g),
        (0.0, 1.0, -g),
        (g, 0.0, -1.0),
        (g, 0.0, 1.0),
        (-g, 0.0, -1.0),
        (-g, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut nf = Vec::with_capacity(f.len() * 4);
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                v.push((v[a as usize] + v[b as usize]).normalize());
                (v.len() - 1) as u32
            })
        };
        for [a, b, c] in f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            nf.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = nf;
    }
    (v, f)
}

/// Closest point on triangle `abc` to `p` with barycentric coordinates.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> (Point3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Möller–Trumbore; returns `t > eps` on hit.
fn ray_triangle(o: &Point3<f64>, d: &Vector3<f64>, a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = d.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = o - a;
    let u = tv.dot(&pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = d.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qv) * inv;
    (t > 1e-12).then_some(t)
}

#[derive(Clone, Debug)]
struct BvhNode {
    lo: Point3<f64>,
    hi: Point3<f64>,
    /// Leaf: triangle range in `order`; inner: child indices.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

#[derive(Clone, Debug, Default)]
struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    fn build(v: &[Point3<f64>], t: &[[u32; 3]]) -> Bvh {
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..t.len()).collect(),
        };
        if t.is_empty() {
            return bvh;
        }
        let centroids: Vec<Point3<f64>> = t
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|i| v[i as usize]);
                Point3::from((a.coords + b.coords + c.coords) / 3.0)
            })
            .collect();
        bvh.build_node(v, t, &centroids, 0, t.len());
        bvh
    }

    fn build_node(&mut self, v: &[Point3<f64>], t: &[[u32; 3]], cent: &[Point3<f64>], start: usize, end: usize) -> usize {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &k in &self.order[start..end] {
            for &i in &t[k] {
                lo = lo.inf(&v[i as usize]);
                hi = hi.sup(&v[i as usize]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(BvhNode {
            lo,
            hi,
            start,
            count: end - start,
            left: 0,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        self.order[start..end].sort_by(|&a, &b| cent[a][axis].total_cmp(&cent[b][axis]).then(a.cmp(&b)));
        let l = self.build_node(v, t, cent, start, mid);
        let r = self.build_node(v, t, cent, mid, end);
        let n = &mut self.nodes[id];
        n.count = 0;
        n.left = l;
        n.right = r;
        id
    }

    fn box_dist2(n: &BvhNode, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for i in 0..3 {
            let e = (n.lo[i] - p[i]).max(0.0).max(p[i] - n.hi[i]);
            d += e * e;
        }
        d
    }

    fn nearest(&self, mesh: &TriMesh, p: &Point3<f64>) -> (usize, Point3<f64>, [f64; 3], f64) {
        let mut best = (usize::MAX, *p, [0.0; 3], f64::INFINITY);
        if self.nodes.is_empty() {
            return best;
        }
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            if Self::box_dist2(n, p) > best.3 {
                continue;
            }
            if n.count > 0 {
                for &k in &self.order[n.start..n.start + n.count] {
                    let [a, b, c] = mesh.triangle(k);
                    let (q, bary) = closest_point_on_triangle(p, &a, &b, &c);
                    let d2 = (q - p).norm_squared();
                    if d2 < best.3 || (d2 == best.3 && k < best.0) {
                        best = (k, q, bary, d2);
                    }
                }
            } else {
                let (l, r) = (n.left, n.right);
                let (dl, dr) = (Self::box_dist2(&self.nodes[l], p), Self::box_dist2(&self.nodes[r], p));
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }

    fn ray_box(n: &BvhNode, o: &Point3<f64>, inv: &Vector3<f64>, tmax: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = tmax;
        for i in 0..3 {
            let mut a = (n.lo[i] - o[i]) * inv[i];
            let mut b = (n.hi[i] - o[i]) * inv[i];
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            if a.is_nan() || b.is_nan() {
                if o[i] < n.lo[i] || o[i] > n.hi[i] {
                    return false;
                }
                continue;
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    fn raycast(&self, mesh: &TriMesh, o: &Point3<f64>, d: &Vector3<f64>) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vector3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
        let mut best: Option<RayHit> = None;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            let tmax = best.map_or(f64::INFINITY, |h| h.t);
            if !Self::ray_box(n, o, &inv, tmax) {
                continue;
            }
            if n.count > 0 {
                for &k in &self.order[n.start..n.start + n.count] {
                    let [a, b, c] = mesh.triangle(k);
                    if let Some(t) = ray_triangle(o, d, &a, &b, &c) {
                        if best.map_or(true, |h| t < h.t) {
                            best = Some(RayHit {
                                t,
                                triangle: k,
                                point: o + d * t,
                            });
                        }
                    }
                }
            } else {
                stack.push(n.left);
                stack.push(n.right);
            }
        }
        best
    }
}
