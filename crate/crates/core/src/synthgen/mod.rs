//! Procedural synthetic captures with known ground truth.

pub mod groom;
pub mod oracle;
pub mod render;

use std::path::Path;

use nalgebra::{Point2, Point3, Vector3};

pub use groom::{crossing_directions, generate_groom, GroomSpec, GroomStyle};
pub use oracle::{ground_truth_field, metric_strand_distance, style_metrics, OrientationOracle, StrandMetrics, COVERAGE_RADIUS};
pub use render::{hair_iou, noisy_masks, render_ground_truth, RenderStyle};

use crate::bundle::CaptureBundle;
use crate::error::{Error, Result};
use crate::geom::camera::sphere_rig;
use crate::geom::strand::write_hair;
use crate::geom::{HairBBox, Strand, TriMesh};
use crate::raster::{save_mask_png, LabelMask};
use crate::tracer::PartingLine;

pub struct SyntheticBundle {
    pub spec: GroomSpec,
    pub bundle: CaptureBundle,
    pub gt: Vec<Strand>,
    /// Exact masks (equal to `bundle.masks[0]` unless noise is enabled).
    pub true_masks: Vec<LabelMask>,
    /// Parting curve on the scalp, for the parted style.
    pub parting_curve: Vec<Point3<f64>>,
}

impl SyntheticBundle {
    pub fn oracle(&self, radius: f64) -> OrientationOracle {
        OrientationOracle::new(&self.gt, radius)
    }

    /// Writes the capture bundle plus `gt.hair`, `gt_masks/` (noise mode
    /// only) and `spec.toml`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.bundle.save(dir)?;
        write_hair(&dir.join("gt.hair"), &self.gt)?;
        if self.spec.mask_sources > 0 {
            let d = dir.join("gt_masks");
            std::fs::create_dir_all(&d)?;
            for (i, m) in self.true_masks.iter().enumerate() {
                save_mask_png(&d.join(format!("{i:03}.png")), m)?;
            }
        }
        std::fs::write(dir.join("spec.toml"), self.spec.to_toml())?;
        Ok(())
    }
}

/// Builds the full scene for `spec`.
pub fn generate_bundle(spec: &GroomSpec, parallel: bool) -> Result<SyntheticBundle> {
    spec.validate()?;
    let inner = spec.head();
    let scalp = spec.scalp(&inner);
    let gt = generate_groom(spec, &inner, &scalp)?;

    let hair_points = gt.iter().flat_map(|s| s.vertices.iter());
    let scalp_points = scalp.iter().map(|&i| &inner.vertices[i as usize]);
    let bbox = HairBBox::from_points(hair_points.chain(scalp_points), 0.01).ok_or_else(|| Error::contract("empty scene"))?;
    let outer = enclosing_ellipsoid(&gt, &bbox, spec.outer_margin)?;

    let target = bbox.center();
    let cameras = sphere_rig(spec.cameras, target, spec.camera_distance, spec.fov_deg.to_radians(), spec.resolution, spec.resolution);
    let style = RenderStyle {
        hair_color: spec.hair_color,
        body_color: spec.body_color,
        background: spec.background,
        line_width: spec.line_width,
        seed: spec.seed,
        ..RenderStyle::default()
    };
    let (images, true_masks): (Vec<_>, Vec<_>) = render_ground_truth(&gt, &inner, &cameras, &style, parallel).into_iter().unzip();
    let masks = if spec.mask_sources > 0 {
        noisy_masks(&true_masks, spec.mask_sources, spec.mask_noise, spec.seed)
    } else {
        vec![true_masks.clone()]
    };

    let (parting, parting_curve) = if spec.style == GroomStyle::Parted {
        let curve = parting_curve(spec, &inner);
        // Annotate in the view looking most directly down on the head.
        let view = (0..cameras.len())
            .max_by(|&a, &b| (-cameras[a].forward().y).total_cmp(&-cameras[b].forward().y))
            .expect("at least one camera");
        let points: Vec<Point2<f64>> = curve.iter().filter_map(|p| cameras[view].project_point(p).ok()).collect();
        (Some(PartingLine { view, points }), curve)
    } else {
        (None, Vec::new())
    };

    let bundle = CaptureBundle {
        cameras,
        images,
        masks,
        inner,
        outer,
        scalp,
        bbox,
        parting,
    };
    bundle.validate()?;
    Ok(SyntheticBundle {
        spec: spec.clone(),
        bundle,
        gt,
        true_masks,
        parting_curve,
    })
}

/// Points on the head where the parting plane cuts the scalp, from front
/// to back.
fn parting_curve(spec: &GroomSpec, head: &TriMesh) -> Vec<Point3<f64>> {
    let n = Vector3::from(spec.parting_normal).try_normalize(1e-12).unwrap_or_else(Vector3::z);
    let u = n.cross(&Vector3::y()).try_normalize(1e-9).unwrap_or_else(Vector3::x);
    let up = u.cross(&n).normalize();
    let up = if up.y < 0.0 { -up } else { up };
    let far = 2.0 * spec.head_radii.iter().copied().fold(0.0, f64::max);
    (0..=40)
        .filter_map(|i| {
            let a = (-50.0 + 2.5 * i as f64).to_radians();
            let dir = up * a.cos() + u * a.sin();
            let origin = Point3::origin() + dir * far;
            head.raycast(&origin, &-dir).map(|h| h.point)
        })
        .collect()
}

/// Ellipsoid around the hair box that contains every strand vertex with
/// at least `margin` to spare.
fn enclosing_ellipsoid(strands: &[Strand], bbox: &HairBBox, margin: f64) -> Result<TriMesh> {
    let c = bbox.center();
    let half = bbox.extent() * 0.5;
    let scale = strands
        .iter()
        .flat_map(|s| s.vertices.iter())
        .map(|p| {
            let d = p - c;
            (d.x / half.x).powi(2) + (d.y / half.y).powi(2) + (d.z / half.z).powi(2)
        })
        .fold(0.0f64, f64::max)
        .sqrt()
        .max(1e-6);
    let mut radii = half * scale + Vector3::repeat(margin);
    for _ in 0..20 {
        let mesh = TriMesh::ellipsoid(c, radii, 3);
        let ok = strands
            .iter()
            .flat_map(|s| s.vertices.iter())
            .all(|p| mesh.contains(p) && mesh.nearest(p).distance > 0.5 * margin);
        if ok {
            return Ok(mesh);
        }
        radii *= 1.05;
    }
    Err(Error::contract("could not fit an outer mesh around the strands"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::histogram::circular_bin_distance;
    use crate::orient2d::{angle_to_bin, build_filter_bank, estimate_orientation_map};
    use crate::raster::{to_gray, LABEL_HAIR};

    fn small(style: GroomStyle) -> GroomSpec {
        let mut s = GroomSpec::new(style);
        s.strands = 80;
        s.cameras = 4;
        s.resolution = 96;
        s
    }

    #[test]
    fn bundle_is_consistent() {
        let b = generate_bundle(&small(GroomStyle::Wavy), true).unwrap();
        assert_eq!(b.bundle.views(), 4);
        for s in &b.gt {
            for v in &s.vertices {
                assert!(b.bundle.outer.contains(v));
                assert!(b.bundle.bbox.contains(v));
            }
        }
        assert!(b.true_masks.iter().all(|m| m.data.contains(&LABEL_HAIR)));
        assert!(b.bundle.parting.is_none());
    }

    #[test]
    fn parallel_and_serial_agree_and_files_are_stable() {
        let spec = small(GroomStyle::Parted);
        let a = generate_bundle(&spec, true).unwrap();
        let b = generate_bundle(&spec, false).unwrap();
        assert_eq!(a.bundle.images, b.bundle.images);
        assert_eq!(a.bundle.masks, b.bundle.masks);
        let p = a.bundle.parting.as_ref().unwrap();
        assert!(p.points.len() > 10);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(d1.path()).unwrap();
        b.write(d2.path()).unwrap();
        for f in ["cameras.txt", "inner.obj", "outer.obj", "gt.hair", "images/000.png", "masks/003.png", "parting.txt"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let back = CaptureBundle::load(d1.path()).unwrap();
        assert_eq!(back.masks, a.bundle.masks);
    }

    #[test]
    fn noisy_sources_are_written() {
        let mut spec = small(GroomStyle::Straight);
        spec.mask_sources = 3;
        let b = generate_bundle(&spec, true).unwrap();
        assert_eq!(b.bundle.masks.len(), 3);
        let d = tempfile::tempdir().unwrap();
        b.write(d.path()).unwrap();
        assert!(d.path().join("masks_2/000.png").exists());
        assert!(d.path().join("gt_masks/000.png").exists());
        assert_eq!(CaptureBundle::load(d.path()).unwrap().masks.len(), 3);
    }

    #[test]
    fn image_orientation_matches_the_oracle() {
        let mut spec = small(GroomStyle::Crossing);
        spec.resolution = 192;
        spec.strands = 40;
        let b = generate_bundle(&spec, true).unwrap();
        let oracle = b.oracle(2e-3);
        let bank = build_filter_bank(8, 4.0, 0.25);
        let cam = &b.bundle.cameras[0];
        let map = estimate_orientation_map(&to_gray(&b.bundle.images[0]), &bank, &b.true_masks[0]).unwrap();
        // High confidence: the upper quartile of hair pixels.
        let mut conf: Vec<f64> = (0..cam.height).flat_map(|y| (0..cam.width).map(move |x| (x, y))).map(|(x, y)| map.confidence(x, y)).filter(|c| *c > 0.0).collect();
        conf.sort_by(f64::total_cmp);
        let cut = conf[3 * conf.len() / 4];
        let (mut checked, mut good) = (0, 0);
        for y in 0..cam.height {
            for x in 0..cam.width {
                if map.confidence(x, y) < cut {
                    continue;
                }
                // Tangents met along the pixel ray; pixels seeing both wisps
                // carry two orientations and are skipped.
                let (o, d) = cam.pixel_center_ray(x, y);
                let seen: Vec<Vector3<f64>> = (0..800).filter_map(|k| oracle.sample(&(o + d * (0.2 + 0.001 * k as f64)))).collect();
                let Some(t) = seen.first() else { continue };
                if seen.iter().any(|u| u.dot(t).abs() < 0.98) {
                    continue;
                }
                let Ok(eta) = cam.project_direction(t) else { continue };
                checked += 1;
                good += usize::from(circular_bin_distance(map.histogram(x, y).argmax(), angle_to_bin(eta, 64), 64) <= 2);
            }
        }
        assert!(checked > 50, "{checked}");
        assert!(good as f64 >= 0.9 * checked as f64, "{good}/{checked}");
    }
}
