//! Stage driver: orientation maps, field fitting, tracing and refinement
//! over a capture bundle directory, one artifact set per stage.
//!
//! Artifacts live next to the bundle files:
//!
//! | stage    | outputs                                                     |
//! |----------|-------------------------------------------------------------|
//! | orient2d | `orient/NNN.ori2`, `orient2d.json`                           |
//! | volume   | `field.hfld`, `volume.json`                                  |
//! | trace    | `traced.hair`, `traced.obj`, `trace.json`                    |
//! | refine   | `refined.hair`, `latent.slat`, `loss.csv`, `refine.json`     |
//!
//! A diverging refinement writes `refine_checkpoint.hair` before failing.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::bundle::CaptureBundle;
use crate::error::{Error, Result};
use crate::geom::strand::{read_hair, write_hair, write_obj_strands};
use crate::geom::{Strand, TriMesh, STRAND_VERTICES};
use crate::gsplat::{
    background_color, hair_color, paint_body, subsample_for_render, write_loss_csv, ControlEvent, RefineConfig, RefineView, Refiner,
};
use crate::hairfield::export::write_debug_exports;
use crate::hairfield::{optimize_field, FieldConfig, HairField, TrainingView};
use crate::latent::{fit_latent_model, StrandLatentModel};
use crate::orient2d::{estimate_orientation_map, FilterBank, FilterParams, OrientationMap};
use crate::parallel::{map_ordered, sub_seed};
use crate::raster::{save_rgb_png, to_gray};
use crate::synthgen::{metric_strand_distance, StrandMetrics, COVERAGE_RADIUS};
use crate::tracer::{extract_strands, lift_parting_line, TraceConfig, TraceScene, TraceStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub parallel: bool,
    /// Integer area-downsampling factor from bundle to working resolution.
    pub downsample: u32,
    pub filter: FilterParams,
    pub field: FieldConfig,
    pub trace: TraceConfig,
    pub refine: RefineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallel: true,
            downsample: 1,
            filter: FilterParams::default(),
            field: FieldConfig::default(),
            trace: TraceConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "config".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 {
            return Err(Error::contract("downsample must be at least 1"));
        }
        if self.filter.bins != self.field.kernel.bins {
            return Err(Error::contract("filter and kernel bin counts must match"));
        }
        self.field.kernel.validate()?;
        self.trace.validate()?;
        self.refine.validate()
    }

    /// Copy with the run-wide seed and parallel flag pushed into every
    /// stage section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.field.seed = self.seed;
        c.trace.seed = self.seed;
        c.refine.seed = self.seed;
        c.field.parallel = self.parallel;
        c.refine.parallel = self.parallel;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Orient2d,
    Volume,
    Trace,
    Refine,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Orient2d => "orient2d",
            Stage::Volume => "volume",
            Stage::Trace => "trace",
            Stage::Refine => "refine",
        }
    }
}

/// Stage artifact paths inside a bundle directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn orient_map(&self, view: usize) -> PathBuf {
        self.dir.join("orient").join(format!("{view:03}.ori2"))
    }

    pub fn field(&self) -> PathBuf {
        self.dir.join("field.hfld")
    }

    pub fn traced(&self) -> PathBuf {
        self.dir.join("traced.hair")
    }

    pub fn refined(&self) -> PathBuf {
        self.dir.join("refined.hair")
    }

    pub fn refine_checkpoint(&self) -> PathBuf {
        self.dir.join("refine_checkpoint.hair")
    }

    pub fn latent(&self) -> PathBuf {
        self.dir.join("latent.slat")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn stats(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}.json", stage.name()))
    }

    pub fn debug_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join("debug").join(stage.name())
    }

    fn require(&self, path: PathBuf, stage: Stage) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { path, stage: stage.name() })
        }
    }

    fn write_stats<T: Serialize>(&self, stage: Stage, stats: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(stats).map_err(|e| Error::format("JSON", e.to_string()))?;
        std::fs::write(self.stats(stage), text + "\n")?;
        Ok(())
    }
}

fn working_bundle(ws: &Workspace, cfg: &PipelineConfig) -> Result<CaptureBundle> {
    CaptureBundle::load(&ws.dir)?.downsampled(cfg.downsample)
}

fn load_maps(ws: &Workspace, views: usize) -> Result<Vec<OrientationMap>> {
    (0..views)
        .map(|i| {
            let p = ws.require(ws.orient_map(i), Stage::Orient2d)?;
            OrientationMap::decode(&std::fs::read(p)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orient2dStats {
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub hair_pixels: Vec<usize>,
    pub mean_confidence: Vec<f64>,
}

/// Per-view orientation distributions at working resolution.
pub fn run_orient2d(ws: &Workspace, cfg: &PipelineConfig, debug_images: bool) -> Result<Orient2dStats> {
    cfg.validate()?;
    let bundle = working_bundle(ws, cfg)?;
    let bank = FilterBank::new(cfg.filter);
    let indices: Vec<usize> = (0..bundle.views()).collect();
    let maps = map_ordered(cfg.parallel, &indices, |_, &i| estimate_orientation_map(&to_gray(&bundle.images[i]), &bank, &bundle.masks[0][i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(ws.dir.join("orient"))?;
    for (i, m) in maps.iter().enumerate() {
        std::fs::write(ws.orient_map(i), m.encode())?;
    }
    if debug_images {
        let d = ws.debug_dir(Stage::Orient2d);
        std::fs::create_dir_all(&d)?;
        for (i, m) in maps.iter().enumerate() {
            save_rgb_png(&d.join(format!("angles_{i:03}.png")), &m.angle_image())?;
        }
    }
    let stats = Orient2dStats {
        views: maps.len(),
        width: bundle.cameras[0].width,
        height: bundle.cameras[0].height,
        hair_pixels: maps.iter().map(|m| m.masked_pixels()).collect(),
        mean_confidence: maps
            .iter()
            .map(|m| {
                let n = m.masked_pixels().max(1) as f64;
                let (w, h) = (m.width, m.height);
                (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| m.confidence(x, y)).sum::<f64>() / n
            })
            .collect(),
    };
    ws.write_stats(Stage::Orient2d, &stats)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeStats {
    pub grid: [usize; 3],
    pub rays: usize,
    pub hair_rays: usize,
    pub phase1_final_loss: Option<f64>,
    pub phase2_final_orientation: Option<f64>,
    pub phase2_final_occupancy: Option<f64>,
    /// Voxels with σ·ρ_h above 0.5.
    pub hair_voxels: usize,
}

/// Builds training views from a bundle and its orientation maps.
pub fn training_views(bundle: &CaptureBundle, maps: Vec<OrientationMap>) -> Vec<TrainingView> {
    bundle
        .cameras
        .iter()
        .zip(maps)
        .enumerate()
        .map(|(i, (camera, orientation))| TrainingView {
            camera: camera.clone(),
            image: bundle.images[i].clone(),
            masks: bundle.masks.iter().map(|src| src[i].clone()).collect(),
            orientation,
        })
        .collect()
}

/// Fits the hair field to the views and orientation maps.
pub fn run_volume(ws: &Workspace, cfg: &PipelineConfig, debug_images: bool) -> Result<VolumeStats> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let bundle = working_bundle(ws, &cfg)?;
    let maps = load_maps(ws, bundle.views())?;
    let views = training_views(&bundle, maps);
    let (field, report) = optimize_field(&views, bundle.bbox, &cfg.field)?;
    field.write(&ws.field())?;
    if debug_images {
        write_debug_exports(&field, &bundle.cameras, &cfg.field, &ws.debug_dir(Stage::Volume))?;
    }
    let stats = VolumeStats {
        grid: field.dims,
        rays: report.rays,
        hair_rays: report.hair_rays,
        phase1_final_loss: report.phase1.last().copied(),
        phase2_final_orientation: report.phase2.last().map(|l| l.orientation),
        phase2_final_occupancy: report.phase2.last().map(|l| l.occupancy),
        hair_voxels: (0..field.len()).filter(|&i| field.sigma[i] * field.rho_h[i] > 0.5).count(),
    };
    info!("volume: {} hair voxels", stats.hair_voxels);
    ws.write_stats(Stage::Volume, &stats)?;
    Ok(stats)
}

/// Traces strands through the stored field; the bundle's parting
/// annotation, if any, is lifted onto the scalp and enforced.
pub fn run_trace(ws: &Workspace, cfg: &PipelineConfig) -> Result<TraceStats> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let field_path = ws.require(ws.field(), Stage::Volume)?;
    let bundle = working_bundle(ws, &cfg)?;
    let field = HairField::read(&field_path)?;
    let curve = bundle
        .parting
        .as_ref()
        .map(|p| lift_parting_line(p, &bundle.cameras[p.view], &bundle.inner));
    let scene = TraceScene {
        field: &field,
        inner: &bundle.inner,
        outer: &bundle.outer,
    };
    let (strands, stats) = extract_strands(&scene, &bundle.scalp, curve.as_deref(), &cfg.trace)?;
    write_hair(&ws.traced(), &strands)?;
    write_obj_strands(&ws.dir.join("traced.obj"), &strands)?;
    info!("trace: {} strands, connection rate {:.4}", stats.strands, stats.connect.connection_rate);
    ws.write_stats(Stage::Trace, &stats)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub initial_strands: usize,
    pub final_strands: usize,
    pub steps: usize,
    pub final_loss: Option<crate::gsplat::LossRecord>,
    pub control: Vec<ControlEvent>,
}

/// Reference views for refinement with body pixels keyed out.
pub fn refine_views(bundle: &CaptureBundle, key: [f64; 3]) -> (Vec<RefineView>, [f64; 3], [f64; 3]) {
    let pairs: Vec<_> = bundle.images.iter().zip(&bundle.masks[0]).collect();
    let views = bundle
        .cameras
        .iter()
        .zip(&pairs)
        .map(|(camera, (img, mask))| RefineView {
            camera: camera.clone(),
            reference: paint_body(img, mask, key),
        })
        .collect();
    (views, background_color(&pairs), hair_color(&pairs))
}

/// Uniform seeded subset of at most `count` strands, in traced order.
fn starting_set(traced: Vec<Strand>, count: Option<usize>, seed: u64) -> Vec<Strand> {
    match count {
        Some(k) if k < traced.len() => {
            let keep = subsample_for_render(traced.len(), k as f64 / traced.len() as f64, sub_seed(seed, 0x1A17, 0));
            keep.into_iter().map(|i| traced[i].clone()).collect()
        }
        _ => traced,
    }
}

/// Photometric refinement of the traced strands.
pub fn run_refine(ws: &Workspace, cfg: &PipelineConfig, debug_images: bool) -> Result<RefineStats> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let traced_path = ws.require(ws.traced(), Stage::Trace)?;
    let field_path = ws.require(ws.field(), Stage::Volume)?;
    let bundle = working_bundle(ws, &cfg)?;
    let field = HairField::read(&field_path)?;
    let initial: Vec<Strand> = read_hair(&traced_path)?.into_iter().filter(|s| s.len() == STRAND_VERTICES && s.root_on_scalp).collect();
    if initial.is_empty() {
        return Err(Error::contract("no scalp-rooted strands to refine"));
    }
    let model = fit_latent_model(&initial)?;
    model.write(&ws.latent())?;
    let initial = starting_set(initial, cfg.refine.initial_strands, cfg.refine.seed);
    let (views, background, hair) = refine_views(&bundle, cfg.refine.key_color);
    let result = refine_with_checkpoint(&initial, &model, &field, &bundle.inner, &views, background, hair, &cfg.refine, &ws.refine_checkpoint())?;
    write_hair(&ws.refined(), &result.strands)?;
    write_loss_csv(&ws.loss_csv(), &result.log)?;
    if debug_images {
        let d = ws.debug_dir(Stage::Refine);
        std::fs::create_dir_all(&d)?;
        let prims: Vec<_> = result
            .gaussians
            .iter()
            .flat_map(|s| s.expand(&s.vertices(&model)).into_iter().map(|(_, g)| g))
            .chain(result.body.primitives())
            .collect();
        for (i, v) in views.iter().enumerate() {
            save_rgb_png(&d.join(format!("render_{i:03}.png")), &crate::gsplat::render(&prims, &v.camera, background, cfg.parallel))?;
        }
    }
    let stats = RefineStats {
        initial_strands: initial.len(),
        final_strands: result.strands.len(),
        steps: result.log.len(),
        final_loss: result.log.last().copied(),
        control: result.control,
    };
    ws.write_stats(Stage::Refine, &stats)?;
    Ok(stats)
}

/// Runs the refinement schedule; on divergence the last finite strand set
/// is written to `checkpoint` and the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn refine_with_checkpoint(
    initial: &[Strand],
    model: &StrandLatentModel,
    field: &HairField,
    inner: &TriMesh,
    views: &[RefineView],
    background: [f64; 3],
    hair: [f64; 3],
    cfg: &RefineConfig,
    checkpoint: &Path,
) -> Result<crate::gsplat::RefineResult> {
    let mut r = Refiner::new(initial, model, field, inner, views, background, hair, cfg)?;
    let mut last_good = initial.to_vec();
    for _ in 0..cfg.steps {
        match r.step() {
            Ok(rec) => {
                if rec.step % 50 == 0 {
                    info!("refine step {}: L_i {:.3e} strands {}", rec.step, rec.image, rec.strands);
                    last_good = r.decoded();
                }
            }
            Err(e @ Error::Divergence { .. }) => {
                write_hair(checkpoint, &last_good)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(r.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Obj,
    Hair,
}

/// Writes strands in the requested format.
pub fn export_strands(strands: &[Strand], format: ExportFormat, out: &Path) -> Result<()> {
    match format {
        ExportFormat::Obj => write_obj_strands(out, strands),
        ExportFormat::Hair => write_hair(out, strands),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantAudit {
    pub strands: usize,
    /// Share of strands rooted within 1 mm of the inner mesh.
    pub root_on_scalp_rate: f64,
    /// Share of strands with exactly 100 vertices.
    pub full_vertex_rate: f64,
    pub min_vertices: usize,
    pub max_vertices: usize,
    /// Share of vertices inside the inner mesh by more than 1 mm.
    pub penetrating_vertex_rate: f64,
    pub max_penetration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: StrandMetrics,
    pub audit: InvariantAudit,
}

const ROOT_TOLERANCE: f64 = 1e-3;

pub fn audit_strands(strands: &[Strand], inner: &TriMesh) -> InvariantAudit {
    let n = strands.len();
    let rooted = strands
        .iter()
        .filter(|s| s.root().is_some_and(|r| inner.distance(r).distance.abs() <= ROOT_TOLERANCE))
        .count();
    let full = strands.iter().filter(|s| s.len() == STRAND_VERTICES).count();
    let mut vertices = 0usize;
    let mut penetrating = 0usize;
    let mut max_penetration: f64 = 0.0;
    for s in strands {
        for v in &s.vertices {
            vertices += 1;
            if let Some(p) = inner.penetration(v) {
                max_penetration = max_penetration.max(p.distance);
                penetrating += usize::from(p.distance > ROOT_TOLERANCE);
            }
        }
    }
    let rate = |k: usize, of: usize| if of == 0 { 1.0 } else { k as f64 / of as f64 };
    InvariantAudit {
        strands: n,
        root_on_scalp_rate: rate(rooted, n),
        full_vertex_rate: rate(full, n),
        min_vertices: strands.iter().map(|s| s.len()).min().unwrap_or(0),
        max_vertices: strands.iter().map(|s| s.len()).max().unwrap_or(0),
        penetrating_vertex_rate: if vertices == 0 { 0.0 } else { penetrating as f64 / vertices as f64 },
        max_penetration,
    }
}

pub fn evaluate(reconstructed: &[Strand], gt: &[Strand], inner: &TriMesh) -> EvalReport {
    EvalReport {
        metrics: metric_strand_distance(reconstructed, gt, COVERAGE_RADIUS),
        audit: audit_strands(reconstructed, inner),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starting_set_is_a_seeded_ordered_subset() {
        let traced: Vec<Strand> = (0..50)
            .map(|i| Strand::new(vec![nalgebra::Point3::new(i as f64, 0.0, 0.0); STRAND_VERTICES], true))
            .collect();
        let a = starting_set(traced.clone(), Some(20), 4);
        assert_eq!(a.len(), 20);
        assert_eq!(a, starting_set(traced.clone(), Some(20), 4));
        assert!(a.windows(2).all(|w| w[0].vertices[0].x < w[1].vertices[0].x));
        assert_eq!(starting_set(traced.clone(), Some(80), 4), traced);
        assert_eq!(starting_set(traced.clone(), None, 4), traced);
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut c = PipelineConfig::default();
        c.seed = 9;
        c.trace.volume_hairs = 123;
        c.field.grid = [32, 40, 48];
        let back = PipelineConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::parse("[trace]\nstep = 1.0\n").is_err());
        let err = PipelineConfig::parse("downsample = 0\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(PipelineConfig::parse("[filter]\nbins = 32\n").is_err());
    }

    #[test]
    fn resolved_seed_reaches_every_stage() {
        let c = PipelineConfig { seed: 42, parallel: false, ..Default::default() }.resolved();
        assert_eq!((c.field.seed, c.trace.seed, c.refine.seed), (42, 42, 42));
        assert!(!c.field.parallel && !c.refine.parallel);
    }

    #[test]
    fn missing_upstream_names_the_stage() {
        let d = tempfile::tempdir().unwrap();
        let ws = Workspace::new(d.path());
        let err = run_refine(&ws, &PipelineConfig::default(), false).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { stage: "trace", .. }), "{err}");
        let err = run_trace(&ws, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { stage: "volume", .. }), "{err}");
    }

    #[test]
    fn gt_audit_is_clean() {
        use crate::synthgen::{generate_groom, GroomSpec, GroomStyle};
        let mut spec = GroomSpec::new(GroomStyle::Straight);
        spec.strands = 40;
        let head = spec.head();
        let gt = generate_groom(&spec, &head, &spec.scalp(&head)).unwrap();
        let r = evaluate(&gt, &gt, &head);
        assert_eq!(r.metrics.mean_distance, 0.0);
        assert_eq!(r.metrics.coverage, 1.0);
        assert_eq!((r.audit.root_on_scalp_rate, r.audit.full_vertex_rate), (1.0, 1.0));
        assert_eq!(r.audit.penetrating_vertex_rate, 0.0);
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), r);
    }
}
