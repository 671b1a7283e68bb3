//! Tile-based Gaussian splatting with an analytic backward pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::primitive::GaussianPrimitive;
use crate::geom::Camera;
use crate::parallel::map_ordered;
use crate::raster::RgbImage;

/// Screen-space variance added to every projected Gaussian, in px².
pub const DILATION: f64 = 0.3;
/// Squared Mahalanobis radius of the support (3σ).
const CUTOFF: f64 = 9.0;
const MAX_ALPHA: f64 = 0.99;
const MIN_TRANSMITTANCE: f64 = 1e-8;
const NEAR: f64 = 1e-3;
const TILE: u32 = 16;

/// Falloff `(exp(-m²/2) - exp(-9/2)) / (1 - exp(-9/2))`, which reaches
/// zero exactly at the cutoff so that alpha stays continuous.
#[inline]
fn falloff(m2: f64) -> (f64, f64) {
    let floor = (-0.5 * CUTOFF).exp();
    let e = (-0.5 * m2).exp();
    let norm = 1.0 / (1.0 - floor);
    ((e - floor) * norm, -0.5 * e * norm)
}

#[derive(Clone, Debug)]
struct Projected {
    prim: usize,
    mean: Vector2<f64>,
    /// Inverse of the screen covariance, `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    bounds: [u32; 4],
}

/// Gradient of a scalar loss with respect to one primitive.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub center: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Pixel Jacobian of the camera-space point, including skew.
fn pixel_jacobian(cam: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let k = &cam.intrinsics;
    let (fx, s, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        fx * iz,
        s * iz,
        -(fx * pc.x + s * pc.y) * iz * iz,
        0.0,
        fy * iz,
        -fy * pc.y * iz * iz,
    )
}

struct Layout {
    splats: Vec<Projected>,
    tiles: Vec<Vec<u32>>,
    tiles_x: u32,
}

fn screen_covariance(cam: &Camera, pc: &Vector3<f64>, cov: &Matrix3<f64>) -> Matrix2<f64> {
    let j = pixel_jacobian(cam, pc);
    let r = &cam.rotation;
    j * (r * cov * r.transpose()) * j.transpose() + Matrix2::identity() * DILATION
}

fn project(cam: &Camera, i: usize, g: &GaussianPrimitive) -> Option<Projected> {
    if g.opacity <= 0.0 {
        return None;
    }
    let pc = cam.to_camera(&g.center);
    if pc.z <= NEAR {
        return None;
    }
    let s = screen_covariance(cam, &pc, &g.covariance);
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(0, 1)];
    if !(det > 0.0) {
        return None;
    }
    let conic = [s[(1, 1)] / det, -s[(0, 1)] / det, s[(0, 0)] / det];
    let mid = 0.5 * (s[(0, 0)] + s[(1, 1)]);
    let lmax = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = CUTOFF.sqrt() * lmax.sqrt();
    let m = cam.project_camera_point(&pc);
    let lo = |c: f64| (c - radius - 0.5).ceil();
    let hi = |c: f64| (c + radius - 0.5).floor();
    let (x0, x1, y0, y1) = (lo(m.x).max(0.0), hi(m.x), lo(m.y).max(0.0), hi(m.y));
    let (w, h) = (cam.width as f64, cam.height as f64);
    if x1 < x0 || y1 < y0 || x0 >= w || y0 >= h || x1 < 0.0 || y1 < 0.0 {
        return None;
    }
    Some(Projected {
        prim: i,
        mean: m.coords,
        conic,
        opacity: g.opacity,
        color: g.color,
        depth: pc.z,
        bounds: [x0 as u32, x1.min(w - 1.0) as u32, y0 as u32, y1.min(h - 1.0) as u32],
    })
}

fn layout(prims: &[GaussianPrimitive], cam: &Camera, parallel: bool) -> Layout {
    let mut splats: Vec<Projected> =
        map_ordered(parallel, prims, |i, g| project(cam, i, g)).into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.prim.cmp(&b.prim)));
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (k, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bounds;
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[(ty * tiles_x + tx) as usize].push(k as u32);
            }
        }
    }
    Layout { splats, tiles, tiles_x }
}

#[inline]
fn alpha_at(s: &Projected, px: f64, py: f64) -> Option<(f64, f64, f64, f64, f64)> {
    let dx = px - s.mean.x;
    let dy = py - s.mean.y;
    let [a, b, c] = s.conic;
    let m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if m2 >= CUTOFF {
        return None;
    }
    let (g, dg) = falloff(m2);
    let raw = s.opacity * g;
    if raw <= 0.0 {
        return None;
    }
    Some((raw.min(MAX_ALPHA), g, dg, dx, dy))
}

fn tile_pixels(cam: &Camera, tiles_x: u32, t: usize) -> impl Iterator<Item = (u32, u32)> {
    let tx = t as u32 % tiles_x;
    let ty = t as u32 / tiles_x;
    let (w, h) = (cam.width, cam.height);
    (ty * TILE..((ty + 1) * TILE).min(h)).flat_map(move |y| (tx * TILE..((tx + 1) * TILE).min(w)).map(move |x| (x, y)))
}

/// Forward compositing of one pixel; returns color, final transmittance
/// and the number of list entries visited.
#[inline]
fn composite_pixel(l: &Layout, list: &[u32], px: f64, py: f64, background: &[f64; 3]) -> ([f64; 3], f64, usize) {
    let mut c = [0.0; 3];
    let mut t = 1.0;
    let mut end = list.len();
    for (n, &k) in list.iter().enumerate() {
        let s = &l.splats[k as usize];
        if let Some((alpha, ..)) = alpha_at(s, px, py) {
            for ch in 0..3 {
                c[ch] += t * alpha * s.color[ch];
            }
            t *= 1.0 - alpha;
            if t < MIN_TRANSMITTANCE {
                end = n + 1;
                break;
            }
        }
    }
    for ch in 0..3 {
        c[ch] += t * background[ch];
    }
    (c, t, end)
}

pub fn render(prims: &[GaussianPrimitive], cam: &Camera, background: [f64; 3], parallel: bool) -> RgbImage {
    let l = layout(prims, cam, parallel);
    let tiles: Vec<usize> = (0..l.tiles.len()).collect();
    let parts = map_ordered(parallel, &tiles, |_, &t| {
        tile_pixels(cam, l.tiles_x, t)
            .map(|(x, y)| (x, y, composite_pixel(&l, &l.tiles[t], x as f64 + 0.5, y as f64 + 0.5, &background).0))
            .collect::<Vec<_>>()
    });
    let mut img = RgbImage::filled(cam.width, cam.height, background);
    for (x, y, c) in parts.into_iter().flatten() {
        img.set(x, y, c);
    }
    img
}

/// Image, mean squared error against `reference` (summed over channels,
/// averaged over pixels) and its gradient for every primitive.
pub fn render_loss_grad(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    background: [f64; 3],
    reference: &RgbImage,
    parallel: bool,
) -> (RgbImage, f64, Vec<PrimitiveGrad>) {
    assert!(reference.width == cam.width && reference.height == cam.height, "reference size must match the camera");
    let l = layout(prims, cam, parallel);
    let scale = 1.0 / (cam.width as f64 * cam.height as f64);
    let tiles: Vec<usize> = (0..l.tiles.len()).collect();
    let parts = map_ordered(parallel, &tiles, |_, &t| {
        let list = &l.tiles[t];
        let mut grads = vec![ScreenGrad::default(); list.len()];
        let mut pixels = Vec::new();
        let mut loss = 0.0;
        for (x, y) in tile_pixels(cam, l.tiles_x, t) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (c, t_final, end) = composite_pixel(&l, list, px, py, &background);
            let r = reference.get(x, y);
            let mut dc = [0.0; 3];
            for ch in 0..3 {
                let e = c[ch] - r[ch];
                loss += e * e * scale;
                dc[ch] = 2.0 * e * scale;
            }
            pixels.push((x, y, c));
            // Back to front: `rest` is the color composited behind entry n.
            let mut t = t_final;
            let mut rest: f64 = (0..3).map(|ch| dc[ch] * t_final * background[ch]).sum();
            for n in (0..end).rev() {
                let s = &l.splats[list[n] as usize];
                let Some((alpha, g, dg, dx, dy)) = alpha_at(s, px, py) else {
                    continue;
                };
                let t_before = t / (1.0 - alpha);
                let dot_color: f64 = (0..3).map(|ch| dc[ch] * s.color[ch]).sum();
                let d_alpha = t_before * dot_color - rest / (1.0 - alpha);
                rest += dot_color * alpha * t_before;
                t = t_before;
                let gr = &mut grads[n];
                for ch in 0..3 {
                    gr.color[ch] += dc[ch] * alpha * t_before;
                }
                if s.opacity * g >= MAX_ALPHA {
                    continue;
                }
                gr.opacity += d_alpha * g;
                let d_m2 = d_alpha * s.opacity * dg;
                let [a, b, cc] = s.conic;
                gr.mean[0] += -2.0 * d_m2 * (a * dx + b * dy);
                gr.mean[1] += -2.0 * d_m2 * (b * dx + cc * dy);
                gr.conic[0] += d_m2 * dx * dx;
                gr.conic[1] += d_m2 * 2.0 * dx * dy;
                gr.conic[2] += d_m2 * dy * dy;
            }
        }
        (pixels, loss, grads)
    });
    let mut img = RgbImage::filled(cam.width, cam.height, background);
    let mut screen = vec![ScreenGrad::default(); l.splats.len()];
    let mut loss = 0.0;
    for (t, (pixels, part, grads)) in parts.into_iter().enumerate() {
        for (x, y, c) in pixels {
            img.set(x, y, c);
        }
        loss += part;
        for (n, g) in grads.iter().enumerate() {
            screen[l.tiles[t][n] as usize].add(g);
        }
    }
    let per_splat = map_ordered(parallel, &l.splats, |k, s| backproject(cam, &prims[s.prim], &screen[k]));
    let mut out = vec![PrimitiveGrad::default(); prims.len()];
    for (s, g) in l.splats.iter().zip(per_splat) {
        out[s.prim] = g;
    }
    (img, loss, out)
}

/// Chains a screen-space gradient back through projection and the
/// covariance transform.
fn backproject(cam: &Camera, g: &GaussianPrimitive, sg: &ScreenGrad) -> PrimitiveGrad {
    let rot = &cam.rotation;
    let pc = cam.to_camera(&g.center);
    let j = pixel_jacobian(cam, &pc);
    let cov_cam = rot * g.covariance * rot.transpose();
    let s = j * cov_cam * j.transpose() + Matrix2::identity() * DILATION;
    let q = s.try_inverse().unwrap_or_else(Matrix2::zeros);
    let gq = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let gs = -(q * gq * q);
    let g_cov_cam = j.transpose() * gs * j;
    let gj = gs * j * cov_cam * 2.0;
    let gm = Vector2::new(sg.mean[0], sg.mean[1]);
    let mut gpc = j.transpose() * gm;
    let k = &cam.intrinsics;
    let (fx, sk, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (iz2, iz3) = (1.0 / (z * z), 1.0 / (z * z * z));
    gpc.z += gj[(0, 0)] * (-fx * iz2) + gj[(0, 1)] * (-sk * iz2) + gj[(0, 2)] * 2.0 * (fx * x + sk * y) * iz3;
    gpc.x += gj[(0, 2)] * (-fx * iz2);
    gpc.y += gj[(0, 2)] * (-sk * iz2);
    gpc.z += gj[(1, 1)] * (-fy * iz2) + gj[(1, 2)] * 2.0 * fy * y * iz3;
    gpc.y += gj[(1, 2)] * (-fy * iz2);
    PrimitiveGrad {
        center: rot.transpose() * gpc,
        covariance: rot.transpose() * g_cov_cam * rot,
        opacity: sg.opacity,
        color: sg.color,
    }
}
