//! Adaptive density control: splitting, pruning, tail cutting.

use nalgebra::{DVector, Point3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::strand::ChainedGaussianStrand;
use crate::geom::{resample_strand, Strand};
use crate::latent::StrandLatentModel;

/// Linear RGB to CIELAB (D65 white).
pub fn linear_rgb_to_lab(c: &[f64; 3]) -> [f64; 3] {
    let [r, g, b] = *c;
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Normalized split scores `ŵ_i / mean(ŵ)` with `ŵ_i = Σ_j d_ij·o_ij`.
pub fn split_scores(strands: &[ChainedGaussianStrand]) -> Vec<f64> {
    let raw: Vec<f64> = strands
        .iter()
        .map(|s| s.diameters().iter().zip(s.opacities()).map(|(d, o)| d * o).sum())
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    if mean <= 0.0 {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|w| w / mean).collect()
}

/// Number of children per strand: `⌈scale·ω_i⌉`. With a capacity, the
/// extra children go to the highest scores first until it is reached.
pub fn child_counts(scores: &[f64], scale: f64, capacity: Option<usize>) -> Vec<usize> {
    let mut counts: Vec<usize> = scores.iter().map(|w| ((scale * w).ceil() as usize).max(1)).collect();
    if let Some(cap) = capacity {
        let total: usize = counts.iter().sum();
        if total > cap {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut budget = cap.saturating_sub(scores.len());
            for &i in &order {
                let extra = (counts[i] - 1).min(budget);
                budget -= extra;
                counts[i] = 1 + extra;
            }
        }
    }
    counts
}

/// Replaces every strand by its children. The first child is the parent
/// itself; the others have their non-root vertices displaced uniformly
/// within the local diameter, orthogonal to the tangent, and re-encoded.
/// Returns the new strands and the parent index of each.
pub fn split_strands(
    strands: &[ChainedGaussianStrand],
    model: &StrandLatentModel,
    scale: f64,
    capacity: Option<usize>,
    seed: u64,
) -> (Vec<ChainedGaussianStrand>, Vec<usize>) {
    let counts = child_counts(&split_scores(strands), scale, capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.iter().sum());
    let mut parents = Vec::with_capacity(out.capacity());
    for (i, (s, &n)) in strands.iter().zip(&counts).enumerate() {
        out.push(s.clone());
        parents.push(i);
        if n < 2 {
            continue;
        }
        let verts = s.vertices(model);
        let diam = s.diameters();
        for _ in 1..n {
            let mut jittered = verts.clone();
            for k in 1..verts.len() {
                let t = (verts[k] - verts[k - 1]).try_normalize(1e-15).unwrap_or(Vector3::z());
                let frame = super::primitive::orthonormal_frame(&t);
                let r = 0.5 * diam[k - 1] * rng.gen::<f64>().sqrt();
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                jittered[k] += (frame.column(1) * a.cos() + frame.column(2) * a.sin()) * r;
            }
            let mut child = s.clone();
            child.latent = model.encode_offsets(&offsets(&jittered));
            out.push(child);
            parents.push(i);
        }
    }
    (out, parents)
}

fn offsets(v: &[Point3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * (v.len() - 1), v[1..].iter().flat_map(|p| {
        let d = p - v[0];
        [d.x, d.y, d.z]
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruneStats {
    pub transparent: usize,
    pub background_colored: usize,
    pub cut: usize,
    pub kept: usize,
}

/// Visibility rule shared by strands and vertices.
fn visible(opacity: f64, lab: &[f64; 3], hair_lab: &[f64; 3], bg_lab: &[f64; 3], min_opacity: f64) -> bool {
    opacity >= min_opacity && lab_distance(lab, hair_lab) <= lab_distance(lab, bg_lab)
}

/// Removes invisible strands, then cuts invisible tail vertices of the
/// survivors and resamples them to the model's vertex count. Returns the
/// kept strands with their source indices.
pub fn prune_strands(
    strands: &[ChainedGaussianStrand],
    model: &StrandLatentModel,
    background: [f64; 3],
    min_opacity: f64,
) -> (Vec<ChainedGaussianStrand>, Vec<usize>, PruneStats) {
    let mut stats = PruneStats::default();
    let bg_lab = linear_rgb_to_lab(&background);
    let mean_lab = |s: &ChainedGaussianStrand| {
        let mut acc = [0.0; 3];
        for j in 0..s.segments {
            let l = linear_rgb_to_lab(&s.segment_color(j));
            (0..3).for_each(|c| acc[c] += l[c] / s.segments as f64);
        }
        acc
    };
    let labs: Vec<[f64; 3]> = strands.iter().map(mean_lab).collect();
    let mut hair_lab = [0.0; 3];
    for l in &labs {
        (0..3).for_each(|c| hair_lab[c] += l[c] / labs.len().max(1) as f64);
    }
    let mut out = Vec::new();
    let mut source = Vec::new();
    for (i, s) in strands.iter().enumerate() {
        if s.mean_opacity() < min_opacity {
            stats.transparent += 1;
            continue;
        }
        if !visible(1.0, &labs[i], &hair_lab, &bg_lab, 0.0) {
            stats.background_colored += 1;
            continue;
        }
        // Vertex k > 0 takes the appearance of the segment ending at it.
        let verts = s.vertices(model);
        let mut keep = verts.len();
        while keep > 2 {
            let j = keep - 2;
            let lab = linear_rgb_to_lab(&s.segment_color(j));
            if visible(s.segment_opacity(j), &lab, &hair_lab, &bg_lab, min_opacity) {
                break;
            }
            keep -= 1;
        }
        let mut kept = s.clone();
        if keep < verts.len() {
            let cut = Strand::new(verts[..keep].to_vec(), true);
            match resample_strand(&cut, verts.len()) {
                Ok(r) => {
                    kept.latent = model.encode_offsets(&offsets(&r.vertices));
                    kept.latent_init = kept.latent.clone();
                    stats.cut += 1;
                }
                Err(_) => {
                    stats.transparent += 1;
                    continue;
                }
            }
        }
        out.push(kept);
        source.push(i);
    }
    stats.kept = out.len();
    if out.is_empty() && !strands.is_empty() {
        log::warn!("pruning removed every strand");
    }
    (out, source, stats)
}

/// Uniform random subset of `count` items without replacement, sorted.
pub fn subsample_for_render(count: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..count).collect();
    }
    let k = ((count as f64 * fraction).round() as usize).min(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, count, k).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::STRAND_VERTICES;
    use crate::gsplat::strand::{softplus_inverse, AppearanceInit, AppearanceMode, DIAMETER_UNIT};
    use crate::latent::StrandLatentModel;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn model() -> StrandLatentModel {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let strands: Vec<Strand> = (0..60)
            .map(|_| {
                let (dx, dy, dz) = (rng.gen_range(-0.3..0.3), rng.gen_range(0.5..1.5), rng.gen_range(-0.3..0.3));
                Strand::new((0..STRAND_VERTICES).map(|i| Point3::new(dx, -dy, dz) * (i as f64 * 1e-3)).collect(), true)
            })
            .collect();
        StrandLatentModel::fit(&strands, 16).unwrap()
    }

    fn strand(m: &StrandLatentModel, color: [f64; 3], opacity: f64) -> ChainedGaussianStrand {
        ChainedGaussianStrand::new(Point3::origin(), DVector::zeros(m.dim()), 99, AppearanceMode::Anchored, &AppearanceInit { diameter: 1e-4, opacity, color })
    }

    #[test]
    fn identical_strands_do_not_multiply() {
        let m = model();
        let s = vec![strand(&m, [0.5; 3], 0.9); 7];
        assert!(split_scores(&s).iter().all(|w| (w - 1.0).abs() < 1e-12));
        assert_eq!(split_strands(&s, &m, 1.0, None, 0).0.len(), 7);
    }

    #[test]
    fn two_to_one_mass_ratio() {
        let m = model();
        let mut a = strand(&m, [0.5; 3], 0.9);
        a.diameter_raw = vec![softplus_inverse(2.0); 8];
        let mut b = a.clone();
        b.diameter_raw = vec![softplus_inverse(1.0); 8];
        let w = split_scores(&[a.clone(), b.clone()]);
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        let (out, parents) = split_strands(&[a, b], &m, 1.0, None, 3);
        assert_eq!(parents, vec![0, 0, 1]);
        assert_eq!(out[1].root, out[0].root);
        let d = (out[1].vertices(&m)[50] - out[0].vertices(&m)[50]).norm();
        assert!(d < 2.0 * DIAMETER_UNIT);
    }

    #[test]
    fn capacity_caps_children() {
        let c = child_counts(&[2.5, 0.2, 0.3], 1.0, None);
        assert_eq!(c, vec![3, 1, 1]);
        assert_eq!(child_counts(&[2.5, 0.2, 0.3], 1.0, Some(4)), vec![2, 1, 1]);
        assert_eq!(child_counts(&[1.0, 1.0], 3.0, None), vec![3, 3]);
    }

    #[test]
    fn pruning_rules() {
        let m = model();
        let bg = [0.05, 0.05, 0.1];
        let hair = [0.5, 0.35, 0.2];
        let faint = strand(&m, hair, 0.05);
        let good = strand(&m, hair, 0.9);
        let dark = strand(&m, bg, 0.9);
        let (kept, src, stats) = prune_strands(&[faint, good.clone(), good.clone(), dark], &m, bg, 0.1);
        assert_eq!(src, vec![1, 2]);
        assert_eq!((stats.transparent, stats.background_colored), (1, 1));
        assert_eq!(kept[0], good);
    }

    #[test]
    fn background_tail_is_cut() {
        let m = model();
        let bg = [0.0, 0.0, 0.0];
        let hair = [0.6, 0.4, 0.2];
        let mut s = ChainedGaussianStrand::new(Point3::origin(), DVector::zeros(m.dim()), 99, AppearanceMode::PerSegment, &AppearanceInit { diameter: 1e-4, opacity: 0.9, color: hair });
        for j in 89..99 {
            s.colors[j] = bg;
        }
        let before = s.vertices(&m);
        let (kept, _, stats) = prune_strands(&[s.clone(), strand(&m, hair, 0.9)], &m, bg, 0.1);
        assert_eq!(stats.cut, 1);
        let after = kept[0].vertices(&m);
        let cut = Strand::new(before[..90].to_vec(), true);
        let expect = resample_strand(&cut, 100).unwrap();
        assert_eq!(after.len(), 100);
        assert!((after[99] - expect.vertices[99]).norm() < 1e-9);
        assert!((after[99] - before[89]).norm() < 1e-9);
    }

    #[test]
    fn subsample_is_seeded() {
        assert_eq!(subsample_for_render(10, 1.0, 5), (0..10).collect::<Vec<_>>());
        let a = subsample_for_render(300, 1.0 / 3.0, 5);
        assert_eq!(a.len(), 100);
        assert_eq!(a, subsample_for_render(300, 1.0 / 3.0, 5));
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d.len(), 100);
    }

    #[test]
    fn lab_reference_values() {
        let w = linear_rgb_to_lab(&[1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-2 && w[2].abs() < 1e-2);
        assert!(linear_rgb_to_lab(&[0.0; 3])[0].abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn scores_sum_to_count(raw in prop::collection::vec(-3.0..3.0f64, 1..20), op in prop::collection::vec(-3.0..3.0f64, 1..20)) {
            let m = model();
            let strands: Vec<ChainedGaussianStrand> = raw.iter().zip(op.iter().cycle()).map(|(&r, &o)| {
                let mut s = strand(&m, [0.5; 3], 0.5);
                s.diameter_raw = (0..8).map(|k| r + 0.1 * k as f64).collect();
                s.opacity_raw = vec![o, -o];
                s
            }).collect();
            let w = split_scores(&strands);
            prop_assert!((w.iter().sum::<f64>() - strands.len() as f64).abs() < 1e-9);
            let counts = child_counts(&w, 1.0, None);
            prop_assert_eq!(counts.iter().sum::<usize>(), w.iter().map(|x| x.ceil() as usize).sum::<usize>());
        }
    }
}
