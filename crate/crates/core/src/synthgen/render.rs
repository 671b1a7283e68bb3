//! Ground-truth images and label masks: anti-aliased polylines over a
//! shaded head.

use std::collections::HashMap;

use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{Camera, Strand, TriMesh};
use crate::parallel::{map_ordered, sub_seed};
use crate::raster::{LabelMask, RgbImage, LABEL_BACKGROUND, LABEL_BODY, LABEL_HAIR};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderStyle {
    pub hair_color: [f64; 3],
    pub body_color: [f64; 3],
    pub background: [f64; 3],
    /// Direction towards the light.
    pub light: Vector3<f64>,
    pub line_width: f64,
    /// Per-strand brightness jitter (relative).
    pub jitter: f64,
    pub seed: u64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            hair_color: [0.45, 0.3, 0.18],
            body_color: [0.85, 0.65, 0.55],
            background: [0.12, 0.14, 0.2],
            light: Vector3::new(0.3, 1.0, 0.6).normalize(),
            line_width: 1.0,
            jitter: 0.15,
            seed: 0,
        }
    }
}

struct Fragment {
    depth: f64,
    alpha: f64,
    color: [f64; 3],
}

/// Renders every camera. Hair pixels are those whose accumulated strand
/// coverage exceeds 0.5 in front of the head.
pub fn render_ground_truth(
    strands: &[Strand],
    head: &TriMesh,
    cameras: &[Camera],
    style: &RenderStyle,
    parallel: bool,
) -> Vec<(RgbImage, LabelMask)> {
    let tints: Vec<f64> = (0..strands.len())
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(style.seed, 11, i as u64));
            1.0 + style.jitter * rng.gen_range(-1.0..=1.0)
        })
        .collect();
    map_ordered(parallel, cameras, |_, cam| render_view(strands, &tints, head, cam, style))
}

fn render_view(strands: &[Strand], tints: &[f64], head: &TriMesh, cam: &Camera, style: &RenderStyle) -> (RgbImage, LabelMask) {
    let (w, h) = (cam.width, cam.height);
    let mut body_depth = vec![f64::INFINITY; (w * h) as usize];
    let mut base = RgbImage::filled(w, h, style.background);
    let mut mask = LabelMask::filled(w, h, LABEL_BACKGROUND);
    let fwd = cam.forward();
    for y in 0..h {
        for x in 0..w {
            let (o, d) = cam.pixel_center_ray(x, y);
            if let Some(hit) = head.raycast(&o, &d) {
                let i = (y * w + x) as usize;
                body_depth[i] = (hit.point - o).dot(&fwd);
                let n = head.nearest(&hit.point).normal;
                let shade = 0.25 + 0.75 * n.dot(&style.light).max(0.0);
                base.data[i] = style.body_color.map(|c| c * shade);
                mask.data[i] = LABEL_BODY;
            }
        }
    }

    let mut frags: Vec<Vec<Fragment>> = (0..w * h).map(|_| Vec::new()).collect();
    for (s, tint) in strands.iter().zip(tints) {
        for (i, f) in strand_coverage(s, cam, style.line_width) {
            if f.0 >= body_depth[i] {
                continue;
            }
            let shade = 0.3 + 0.7 * (1.0 - f.2.dot(&style.light).powi(2)).max(0.0).sqrt();
            let color = style.hair_color.map(|c| (c * shade * tint).clamp(0.0, 1.0));
            frags[i].push(Fragment { depth: f.0, alpha: f.1, color });
        }
    }

    let mut img = base;
    for (i, list) in frags.iter_mut().enumerate() {
        if list.is_empty() {
            continue;
        }
        list.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        let mut t = 1.0;
        let mut c = [0.0; 3];
        for f in list.iter() {
            for k in 0..3 {
                c[k] += t * f.alpha * f.color[k];
            }
            t *= 1.0 - f.alpha;
        }
        for k in 0..3 {
            img.data[i][k] = c[k] + t * img.data[i][k];
        }
        if 1.0 - t > 0.5 {
            mask.data[i] = LABEL_HAIR;
        }
    }
    (img, mask)
}

/// Per pixel of one strand: (depth, coverage, tangent) of the segment
/// covering it most.
fn strand_coverage(s: &Strand, cam: &Camera, width: f64) -> HashMap<usize, (f64, f64, Vector3<f64>)> {
    let mut out: HashMap<usize, (f64, f64, Vector3<f64>)> = HashMap::new();
    let half = 0.5 * width + 0.5;
    for seg in s.vertices.windows(2) {
        let (Ok(a), Ok(b)) = (cam.project_point(&seg[0]), cam.project_point(&seg[1])) else {
            continue;
        };
        let (da, db) = (cam.depth(&seg[0]), cam.depth(&seg[1]));
        let tangent = (seg[1] - seg[0]).try_normalize(1e-15).unwrap_or_else(Vector3::zeros);
        let x0 = (a.x.min(b.x) - half).floor().max(0.0) as i64;
        let x1 = (a.x.max(b.x) + half).ceil().min(cam.width as f64 - 1.0) as i64;
        let y0 = (a.y.min(b.y) - half).floor().max(0.0) as i64;
        let y1 = (a.y.max(b.y) + half).ceil().min(cam.height as f64 - 1.0) as i64;
        let ab = b - a;
        let len2 = ab.norm_squared();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let q = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 { ((q - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let dist = (a + ab * t - q).norm();
                let cov = (half - dist).clamp(0.0, 1.0);
                if cov <= 0.0 {
                    continue;
                }
                let i = (y as u32 * cam.width + x as u32) as usize;
                let depth = da + (db - da) * t;
                let e = out.entry(i).or_insert((depth, 0.0, tangent));
                if cov > e.1 {
                    *e = (depth, cov, tangent);
                }
            }
        }
    }
    out
}

/// Noisy copies of `masks` for each of `sources` segmenters. Each source
/// relabels random disks covering about `level` of the hair area: hair
/// becomes background and some non-hair becomes hair.
pub fn noisy_masks(masks: &[LabelMask], sources: usize, level: f64, seed: u64) -> Vec<Vec<LabelMask>> {
    (0..sources)
        .map(|s| {
            masks
                .iter()
                .enumerate()
                .map(|(v, m)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, s as u64 + 1, v as u64));
                    corrupt(m, level, &mut rng)
                })
                .collect()
        })
        .collect()
}

fn corrupt(mask: &LabelMask, level: f64, rng: &mut ChaCha8Rng) -> LabelMask {
    let hair: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i] == LABEL_HAIR).collect();
    let mut out = mask.clone();
    if hair.is_empty() {
        return out;
    }
    let budget = (level * hair.len() as f64) as usize;
    let mut changed = 0usize;
    let mut guard = 0;
    while changed < budget && guard < 10_000 {
        guard += 1;
        let r: f64 = rng.gen_range(3.0..8.0);
        // Centers near hair so both removals and additions hug the boundary.
        let c = hair[rng.gen_range(0..hair.len())];
        let (cx, cy) = ((c as u32 % mask.width) as f64, (c as u32 / mask.width) as f64);
        let (cx, cy) = (cx + rng.gen_range(-r..r), cy + rng.gen_range(-r..r));
        let erase = rng.gen_bool(0.6);
        let x0 = (cx - r).floor().max(0.0) as u32;
        let y0 = (cy - r).floor().max(0.0) as u32;
        let x1 = ((cx + r).ceil() as u32).min(mask.width - 1);
        let y1 = ((cy + r).ceil() as u32).min(mask.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) > r * r {
                    continue;
                }
                let i = out.index(x, y);
                let truth = mask.data[i];
                let new = if erase && truth == LABEL_HAIR {
                    LABEL_BACKGROUND
                } else if !erase && truth != LABEL_HAIR {
                    LABEL_HAIR
                } else {
                    continue;
                };
                if out.data[i] != new {
                    out.data[i] = new;
                    changed += 1;
                }
            }
        }
    }
    out
}

/// Intersection over union of the hair label.
pub fn hair_iou(pred: &LabelMask, truth: &LabelMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.data.iter().zip(&truth.data) {
        let (a, b) = (*a == LABEL_HAIR, *b == LABEL_HAIR);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
