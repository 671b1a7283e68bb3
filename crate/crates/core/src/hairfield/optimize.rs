//! Two-phase fitting of a [`HairField`] to calibrated views: density and
//! radiance from photometric loss, then orientation and occupancies from
//! rendered orientation distributions and segmentation.

use log::{debug, info};
use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::{blend_angle, HairField};
use super::kernel::{KernelMass, KernelParams, KernelScratch, OrientationKernel};
use super::loss::{occupancy_loss_grad, orientation_loss_raw, ResponseBlur};
use super::projection::ProjectionTable;
use super::render::{composite, composite_backward, render_occupancy, RaySampleSet};
use crate::error::{Error, Result};
use crate::geom::{Camera, HairBBox, OrientationHistogram2D};
use crate::optim::Adam;
use crate::orient2d::OrientationMap;
use crate::parallel::{map_ordered, sub_seed};
use crate::raster::{LabelMask, RgbImage, LABEL_BACKGROUND, LABEL_BODY, LABEL_HAIR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: [usize; 3],
    pub samples_per_ray: usize,
    /// Multiplier from σ ∈ [0, 1] to extinction per meter.
    pub density_scale: f64,
    pub kernel: KernelParams,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub rays_per_batch: usize,
    /// Share of each phase-2 batch drawn from hair pixels.
    pub hair_ray_fraction: f64,
    pub lr_density: f64,
    pub lr_radiance: f64,
    pub lr_angle: f64,
    pub lr_occupancy: f64,
    /// Learning rates decay exponentially to this fraction by the last
    /// step of each phase.
    pub lr_final_fraction: f64,
    pub orientation_weight: f64,
    pub occupancy_weight: f64,
    /// Samples with blend weight at or below this skip kernel expansion.
    pub weight_threshold: f64,
    pub init_sigma: f64,
    pub key_color: [f64; 3],
    /// Width (bins) of the filter-bank spread applied to rendered
    /// distributions before comparison; zero compares them raw.
    pub response_blur_bins: f64,
    /// Start phase 2 from multi-view votes instead of the random angles.
    pub lift_init: bool,
    /// Voxels whose per-cell opacity reaches this take part in the vote.
    pub lift_min_opacity: f64,
    /// Supervise with a one-hot distribution at the reference argmax.
    pub max_only: bool,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: [128; 3],
            samples_per_ray: 64,
            density_scale: 1000.0,
            kernel: KernelParams::default(),
            phase1_steps: 300,
            phase2_steps: 300,
            rays_per_batch: 1024,
            hair_ray_fraction: 0.75,
            lr_density: 0.05,
            lr_radiance: 0.05,
            lr_angle: 0.02,
            lr_occupancy: 0.05,
            lr_final_fraction: 0.1,
            orientation_weight: 100.0,
            occupancy_weight: 0.02,
            weight_threshold: 1e-3,
            init_sigma: 0.01,
            key_color: [0.0, 1.0, 0.0],
            response_blur_bins: 3.5,
            lift_init: true,
            lift_min_opacity: 0.1,
            max_only: false,
            seed: 0,
            parallel: true,
        }
    }
}

/// One calibrated view with its supervision.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub camera: Camera,
    pub image: RgbImage,
    /// Segmentation sources; the first also drives key-color painting and
    /// hair-ray selection.
    pub masks: Vec<LabelMask>,
    pub orientation: OrientationMap,
}

impl TrainingView {
    fn check(&self) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        let sized = |iw: u32, ih: u32| iw == w && ih == h;
        if self.masks.is_empty() {
            return Err(Error::contract("training view needs at least one mask"));
        }
        if !sized(self.image.width, self.image.height)
            || !self.masks.iter().all(|m| sized(m.width, m.height))
            || !sized(self.orientation.width, self.orientation.height)
        {
            return Err(Error::contract("view images, masks and orientation map must match the camera size"));
        }
        Ok(())
    }
}

/// A pixel ray that crosses the field box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRay {
    pub view: u32,
    pub x: u32,
    pub y: u32,
    pub range: (f64, f64),
}

/// Per-voxel gradient channels.
pub const CH_SIGMA: usize = 0;
pub const CH_RHO_H: usize = 1;
pub const CH_RHO_B: usize = 2;
pub const CH_THETA: usize = 3;
pub const CH_PHI: usize = 4;
pub const CH_RGB: usize = 5;
pub const CHANNELS: usize = 8;

type SparseGrad = Vec<(u32, [f64; CHANNELS])>;

/// Dense gradient with the field's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradient {
    pub channels: [Vec<f64>; CHANNELS],
}

impl FieldGradient {
    pub fn zeros(n: usize) -> Self {
        Self {
            channels: std::array::from_fn(|_| vec![0.0; n]),
        }
    }

    fn clear(&mut self) {
        for c in &mut self.channels {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn add(&mut self, sparse: &SparseGrad, scale: f64) {
        for (i, g) in sparse {
            for (c, v) in g.iter().enumerate() {
                self.channels[c][*i as usize] += scale * v;
            }
        }
    }
}

/// Shared read-only state for one fitting run.
pub struct FieldProblem<'a> {
    pub views: &'a [TrainingView],
    pub tables: Vec<ProjectionTable>,
    pub kernel: OrientationKernel,
    pub blur: ResponseBlur,
    pub cfg: FieldConfig,
}

/// Loss terms reported per step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub photometric: f64,
    pub orientation: f64,
    pub occupancy: f64,
}

impl<'a> FieldProblem<'a> {
    pub fn new(views: &'a [TrainingView], cfg: FieldConfig) -> Result<Self> {
        cfg.kernel.validate()?;
        for v in views {
            v.check()?;
        }
        let tables = views.iter().map(|v| ProjectionTable::new(&v.camera, cfg.kernel.bins)).collect();
        Ok(Self {
            views,
            tables,
            kernel: OrientationKernel::new(cfg.kernel),
            blur: ResponseBlur::new(cfg.kernel.bins, cfg.response_blur_bins),
            cfg,
        })
    }

    /// All pixel rays that cross `bbox`.
    pub fn pixel_rays(&self, bbox: &HairBBox) -> Vec<PixelRay> {
        let mut out = Vec::new();
        for (vi, v) in self.views.iter().enumerate() {
            for y in 0..v.camera.height {
                for x in 0..v.camera.width {
                    let (o, d) = v.camera.pixel_center_ray(x, y);
                    if let Some(range) = bbox.clip_ray(&o, &d) {
                        if range.1 > range.0 {
                            out.push(PixelRay {
                                view: vi as u32,
                                x,
                                y,
                                range,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn is_hair_ray(&self, r: &PixelRay) -> bool {
        let v = &self.views[r.view as usize];
        *v.masks[0].get(r.x, r.y) == LABEL_HAIR && v.orientation.values(r.x, r.y).is_some()
    }

    fn march(&self, field: &HairField, r: &PixelRay, rng: Option<&mut ChaCha8Rng>) -> RaySampleSet {
        let (o, d) = self.views[r.view as usize].camera.pixel_center_ray(r.x, r.y);
        RaySampleSet::march(field, o, d, r.range, self.cfg.samples_per_ray, self.cfg.density_scale, rng)
    }

    fn reference_distribution(&self, r: &PixelRay) -> Option<Vec<f64>> {
        self.reference_at(r.view as usize, r.x, r.y)
    }

    /// Supervision distribution at a pixel of `view`, one-hot in max-only
    /// mode. `None` off hair or without signal.
    pub fn reference_at(&self, view: usize, x: u32, y: u32) -> Option<Vec<f64>> {
        let v = self.views[view].orientation.values(x, y)?;
        let mut f: Vec<f64> = v.iter().map(|&a| a as f64).collect();
        if self.cfg.max_only {
            let k = OrientationHistogram2D::from_values(f.clone()).ok()?.argmax();
            f.iter_mut().for_each(|a| *a = 0.0);
            f[k] = 1.0;
        } else {
            let z: f64 = f.iter().sum();
            if !(z > 0.0) {
                return None;
            }
            f.iter_mut().for_each(|a| *a /= z);
        }
        Some(f)
    }

    /// Most frequent label over the mask sources; ties go to the first
    /// source.
    fn majority_label(&self, r: &PixelRay) -> u8 {
        let masks = &self.views[r.view as usize].masks;
        let first = *masks[0].get(r.x, r.y);
        let count = |l: u8| masks.iter().filter(|m| *m.get(r.x, r.y) == l).count();
        [LABEL_HAIR, LABEL_BODY, LABEL_BACKGROUND]
            .into_iter()
            .filter(|&l| l != first)
            .fold(first, |best, l| if count(l) > count(best) { l } else { best })
    }

    fn occupancy_references(&self, r: &PixelRay) -> Vec<(f64, f64)> {
        self.views[r.view as usize]
            .masks
            .iter()
            .map(|m| {
                let l = *m.get(r.x, r.y);
                ((l == LABEL_HAIR) as u8 as f64, (l == LABEL_BODY) as u8 as f64)
            })
            .collect()
    }

    /// Photometric loss of one ray against a background color, with
    /// sparse gradients for σ and radiance.
    pub fn photometric_ray(&self, field: &HairField, r: &PixelRay, background: [f64; 3], rng: Option<&mut ChaCha8Rng>) -> (f64, SparseGrad) {
        let samples = self.march(field, r, rng);
        let comp = composite(&samples);
        let view = &self.views[r.view as usize];
        let target = match self.majority_label(r) {
            LABEL_HAIR => *view.image.get(r.x, r.y),
            LABEL_BODY => self.cfg.key_color,
            _ => background,
        };
        let mut color = [0.0; 3];
        for (s, &w) in samples.samples.iter().zip(&comp.weight) {
            for c in 0..3 {
                color[c] += w * s.value.rgb[c];
            }
        }
        let mut resid = [0.0; 3];
        let mut loss = 0.0;
        for c in 0..3 {
            resid[c] = color[c] + comp.residual * background[c] - target[c];
            loss += resid[c] * resid[c];
        }
        let d_weight: Vec<f64> = samples
            .samples
            .iter()
            .map(|s| (0..3).map(|c| 2.0 * resid[c] * s.value.rgb[c]).sum())
            .collect();
        let d_res: f64 = (0..3).map(|c| 2.0 * resid[c] * background[c]).sum();
        let d_x = composite_backward(&comp, &d_weight, d_res);
        let mut grad = SparseGrad::with_capacity(samples.len() * 8);
        for (k, s) in samples.samples.iter().enumerate() {
            let st = s.stencil.as_ref().expect("marched samples carry stencils");
            let d_sigma = d_x[k] * s.delta;
            let w = comp.weight[k];
            for (&i, &sw) in st.idx.iter().zip(&st.w) {
                let mut g = [0.0; CHANNELS];
                g[CH_SIGMA] = d_sigma * sw;
                for c in 0..3 {
                    g[CH_RGB + c] = 2.0 * resid[c] * w * sw;
                }
                grad.push((i, g));
            }
        }
        (loss, grad)
    }

    /// Weighted orientation and occupancy loss of one ray with sparse
    /// gradients for every channel that influences it.
    pub fn structure_ray(&self, field: &HairField, r: &PixelRay, rng: Option<&mut ChaCha8Rng>) -> (StepLoss, SparseGrad) {
        let samples = self.march(field, r, rng);
        let comp = composite(&samples);
        let n = samples.len();
        let mut d_weight = vec![0.0; n];
        let mut d_theta = vec![0.0; n];
        let mut d_phi = vec![0.0; n];
        let mut loss = StepLoss::default();

        let reference = if self.is_hair_ray(r) { self.reference_distribution(r) } else { None };
        if let Some(reference) = reference {
            let bins = self.kernel.bins();
            let mut buf = vec![0.0; bins * bins];
            let mut scratch = KernelScratch::default();
            let mut active: Vec<(usize, KernelMass)> = Vec::new();
            for (k, s) in samples.samples.iter().enumerate() {
                let w = comp.weight[k];
                if w > self.cfg.weight_threshold {
                    let m = self.kernel.accumulate((s.value.theta, s.value.phi), w, &mut buf, &mut scratch, true);
                    active.push((k, m));
                }
            }
            let raw = self.tables[r.view as usize].project_raw(&buf);
            if let Some((l, d_blurred)) = orientation_loss_raw(&self.blur.apply(&raw.values), &reference) {
                let d_raw = self.blur.apply(&d_blurred);
                let scale = self.cfg.orientation_weight;
                loss.orientation = scale * l;
                for (e, arg) in raw.argmax.iter().enumerate() {
                    let Some(a) = arg else { continue };
                    let g = scale * d_raw[e];
                    if g == 0.0 {
                        continue;
                    }
                    let (ta, pb) = (*a as usize / bins, *a as usize % bins);
                    for (k, mass) in &active {
                        let s = &samples.samples[*k].value;
                        let (h, dt, dp) = self.kernel.value_with_grad(ta, pb, (s.theta, s.phi), mass);
                        let w = comp.weight[*k];
                        d_weight[*k] += g * h;
                        d_theta[*k] += g * w * dt;
                        d_phi[*k] += g * w * dp;
                    }
                }
            }
        }

        let occ = render_occupancy(&samples);
        let (l, gh, gb) = occupancy_loss_grad((occ.psi_h, occ.psi_b), &self.occupancy_references(r));
        let wo = self.cfg.occupancy_weight;
        loss.occupancy = wo * l;
        for (k, s) in samples.samples.iter().enumerate() {
            d_weight[k] += wo * (gh * s.value.rho_h + gb * s.value.rho_b);
        }
        let d_x = composite_backward(&comp, &d_weight, 0.0);

        let mut grad = SparseGrad::with_capacity(n * 8);
        for (k, s) in samples.samples.iter().enumerate() {
            let st = s.stencil.as_ref().expect("marched samples carry stencils");
            let w = comp.weight[k];
            let d_sigma = d_x[k] * s.delta;
            let angle_factors = |vals: &[f64]| {
                let (_, sn, cs, r2) = blend_angle(st.idx.iter().zip(&st.w).map(|(&i, &sw)| (sw * field.angle_weight(i as usize), vals[i as usize])));
                (sn, cs, r2)
            };
            let (ts, tc, tr) = angle_factors(&field.theta);
            let (ps, pc, pr) = angle_factors(&field.phi);
            for (&i, &sw) in st.idx.iter().zip(&st.w) {
                let mut g = [0.0; CHANNELS];
                g[CH_SIGMA] = d_sigma * sw;
                g[CH_RHO_H] = wo * gh * w * sw;
                g[CH_RHO_B] = wo * gb * w * sw;
                let iu = i as usize;
                let u = sw * field.angle_weight(iu);
                if tr > 1e-24 && d_theta[k] != 0.0 {
                    let (s2, c2) = (2.0 * field.theta[iu]).sin_cos();
                    g[CH_THETA] = d_theta[k] * u * (tc * c2 + ts * s2) / tr;
                    g[CH_SIGMA] += d_theta[k] * sw * 0.5 * (tc * s2 - ts * c2) / tr;
                }
                if pr > 1e-24 && d_phi[k] != 0.0 {
                    let (s2, c2) = (2.0 * field.phi[iu]).sin_cos();
                    g[CH_PHI] = d_phi[k] * u * (pc * c2 + ps * s2) / pr;
                    g[CH_SIGMA] += d_phi[k] * sw * 0.5 * (pc * s2 - ps * c2) / pr;
                }
                grad.push((i, g));
            }
        }
        (loss, grad)
    }

    /// Mean structure loss over `rays` (midpoint samples) and its dense
    /// gradient.
    pub fn structure_loss(&self, field: &HairField, rays: &[PixelRay]) -> (f64, FieldGradient) {
        let results = map_ordered(self.cfg.parallel, rays, |_, r| self.structure_ray(field, r, None));
        let mut grad = FieldGradient::zeros(field.len());
        let scale = 1.0 / rays.len().max(1) as f64;
        let mut total = 0.0;
        for (l, g) in &results {
            total += l.orientation + l.occupancy;
            grad.add(g, scale);
        }
        (total * scale, grad)
    }
}

/// Field initialized for fitting: uniform low density, mid occupancies
/// and seeded random orientations.
pub fn init_field(bbox: HairBBox, cfg: &FieldConfig) -> HairField {
    let mut f = HairField::new(cfg.grid, bbox);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 0xF1E1D, 0));
    f.sigma.iter_mut().for_each(|v| *v = cfg.init_sigma);
    f.rho_h.iter_mut().for_each(|v| *v = 0.5);
    f.rho_b.iter_mut().for_each(|v| *v = 0.5);
    f.rgb.iter_mut().for_each(|v| *v = [0.5; 3]);
    for a in f.theta.iter_mut().chain(f.phi.iter_mut()) {
        *a = rng.gen_range(1e-3..=std::f64::consts::PI);
    }
    f
}

/// Loss history of a fitting run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub phase1: Vec<f64>,
    pub phase2: Vec<StepLoss>,
    pub rays: usize,
    pub hair_rays: usize,
    /// Voxels whose angles came from the multi-view vote.
    pub lifted: usize,
}

/// Fits density and radiance, then orientation and occupancies.
pub fn optimize_field(views: &[TrainingView], bbox: HairBBox, cfg: &FieldConfig) -> Result<(HairField, FitReport)> {
    if views.len() < 2 {
        return Err(Error::contract("field fitting needs at least two views"));
    }
    let mut field = init_field(bbox, cfg);
    let report = fit_field(&mut field, views, cfg, true)?;
    Ok((field, report))
}

/// Runs phase 1 (if requested) and phase 2 on an existing field.
pub fn fit_field(field: &mut HairField, views: &[TrainingView], cfg: &FieldConfig, run_phase1: bool) -> Result<FitReport> {
    let problem = FieldProblem::new(views, cfg.clone())?;
    let rays = problem.pixel_rays(&field.bbox);
    if rays.is_empty() {
        return Err(Error::EmptyVolume);
    }
    let (hair, other): (Vec<PixelRay>, Vec<PixelRay>) = rays.iter().partition(|r| problem.is_hair_ray(r));
    let mut report = FitReport {
        rays: rays.len(),
        hair_rays: hair.len(),
        ..Default::default()
    };
    info!("field fit: {} rays, {} on hair", rays.len(), hair.len());
    if run_phase1 {
        report.phase1 = phase1(field, &problem, &rays)?;
    }
    if cfg.lift_init {
        report.lifted = super::lift::lift_orientations(field, &problem);
        info!("orientation vote set {} voxels", report.lifted);
    }
    report.phase2 = phase2(field, &problem, &hair, &other)?;
    Ok(report)
}

fn draw_batch(rng: &mut ChaCha8Rng, pool: &[PixelRay], count: usize, out: &mut Vec<PixelRay>) {
    if pool.is_empty() || count == 0 {
        return;
    }
    if count >= pool.len() {
        out.extend_from_slice(pool);
    } else {
        out.extend(pool.choose_multiple(rng, count).copied());
    }
}

/// Learning-rate multiplier at `step` of `steps`.
fn decay(cfg: &FieldConfig, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return 1.0;
    }
    cfg.lr_final_fraction.powf(step as f64 / (steps - 1) as f64)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: format!("{what} loss is {v}"),
        })
    }
}

fn phase1(field: &mut HairField, p: &FieldProblem, rays: &[PixelRay]) -> Result<Vec<f64>> {
    let cfg = &p.cfg;
    let n = field.len();
    let mut opt_sigma = Adam::new(n, cfg.lr_density);
    let mut opt_rgb: [Adam; 3] = std::array::from_fn(|_| Adam::new(n, cfg.lr_radiance));
    let mut grad = FieldGradient::zeros(n);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1, 0));
    let mut history = Vec::with_capacity(cfg.phase1_steps);
    let mut channel = vec![0.0; n];
    for step in 0..cfg.phase1_steps {
        let mut batch = Vec::with_capacity(cfg.rays_per_batch);
        draw_batch(&mut rng, rays, cfg.rays_per_batch, &mut batch);
        let fld: &HairField = field;
        let results = map_ordered(cfg.parallel, &batch, |i, r| {
            let mut rr = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1 + step as u64, i as u64 + 1));
            let bg = [rr.gen(), rr.gen(), rr.gen()];
            p.photometric_ray(fld, r, bg, Some(&mut rr))
        });
        grad.clear();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grad.add(g, scale);
        }
        loss *= scale;
        check_finite(step, "photometric", loss)?;
        history.push(loss);
        let f = decay(cfg, step, cfg.phase1_steps);
        opt_sigma.lr = cfg.lr_density * f;
        opt_rgb.iter_mut().for_each(|o| o.lr = cfg.lr_radiance * f);
        opt_sigma.step(&mut field.sigma, &grad.channels[CH_SIGMA]);
        for c in 0..3 {
            for (v, rgb) in channel.iter_mut().zip(&field.rgb) {
                *v = rgb[c];
            }
            opt_rgb[c].step(&mut channel, &grad.channels[CH_RGB + c]);
            for (v, rgb) in channel.iter().zip(field.rgb.iter_mut()) {
                rgb[c] = *v;
            }
        }
        field.project_to_valid();
        if step % 50 == 0 {
            debug!("phase 1 step {step}: loss {loss:.6}");
        }
    }
    Ok(history)
}

fn phase2(field: &mut HairField, p: &FieldProblem, hair: &[PixelRay], other: &[PixelRay]) -> Result<Vec<StepLoss>> {
    let cfg = &p.cfg;
    let n = field.len();
    let mut opt_theta = Adam::new(n, cfg.lr_angle);
    let mut opt_phi = Adam::new(n, cfg.lr_angle);
    let mut opt_rho_h = Adam::new(n, cfg.lr_occupancy);
    let mut opt_rho_b = Adam::new(n, cfg.lr_occupancy);
    let mut grad = FieldGradient::zeros(n);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2, 0));
    let n_hair = if other.is_empty() {
        cfg.rays_per_batch
    } else if hair.is_empty() {
        0
    } else {
        (cfg.rays_per_batch as f64 * cfg.hair_ray_fraction).round() as usize
    };
    let n_other = cfg.rays_per_batch.saturating_sub(n_hair);
    let mut history = Vec::with_capacity(cfg.phase2_steps);
    for step in 0..cfg.phase2_steps {
        let mut batch = Vec::with_capacity(cfg.rays_per_batch);
        draw_batch(&mut rng, hair, n_hair, &mut batch);
        draw_batch(&mut rng, other, n_other, &mut batch);
        if batch.is_empty() {
            break;
        }
        let fld: &HairField = field;
        let results = map_ordered(cfg.parallel, &batch, |i, r| {
            let mut rr = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1 << 32 | step as u64, i as u64 + 1));
            p.structure_ray(fld, r, Some(&mut rr))
        });
        grad.clear();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = StepLoss::default();
        for (l, g) in &results {
            loss.orientation += l.orientation * scale;
            loss.occupancy += l.occupancy * scale;
            grad.add(g, scale);
        }
        check_finite(step, "structure", loss.orientation + loss.occupancy)?;
        history.push(loss);
        let f = decay(cfg, step, cfg.phase2_steps);
        opt_theta.lr = cfg.lr_angle * f;
        opt_phi.lr = cfg.lr_angle * f;
        opt_rho_h.lr = cfg.lr_occupancy * f;
        opt_rho_b.lr = cfg.lr_occupancy * f;
        opt_theta.step(&mut field.theta, &grad.channels[CH_THETA]);
        opt_phi.step(&mut field.phi, &grad.channels[CH_PHI]);
        opt_rho_h.step(&mut field.rho_h, &grad.channels[CH_RHO_H]);
        opt_rho_b.step(&mut field.rho_b, &grad.channels[CH_RHO_B]);
        field.project_to_valid();
        if step % 50 == 0 {
            debug!("phase 2 step {step}: ori {:.6} occ {:.6}", loss.orientation, loss.occupancy);
        }
    }
    Ok(history)
}

/// Evaluation-time rendering of one pixel: occupancy and the projected,
/// normalized orientation distribution (`None` without mass).
pub fn render_pixel(
    field: &HairField,
    camera: &Camera,
    table: &ProjectionTable,
    kernel: &OrientationKernel,
    cfg: &FieldConfig,
    x: u32,
    y: u32,
) -> (super::render::Occupancy, Option<OrientationHistogram2D>) {
    let (o, d) = camera.pixel_center_ray(x, y);
    render_ray(field, o, d, table, kernel, cfg)
}

pub fn render_ray(
    field: &HairField,
    origin: Point3<f64>,
    dir: Vector3<f64>,
    table: &ProjectionTable,
    kernel: &OrientationKernel,
    cfg: &FieldConfig,
) -> (super::render::Occupancy, Option<OrientationHistogram2D>) {
    let Some(range) = field.bbox.clip_ray(&origin, &dir) else {
        return (Default::default(), None);
    };
    let samples = RaySampleSet::march::<ChaCha8Rng>(field, origin, dir, range, cfg.samples_per_ray, cfg.density_scale, None);
    let occ = render_occupancy(&samples);
    let h3 = super::render::render_ray_distribution(&samples, kernel);
    let raw = table.project_raw(h3.values());
    let h2 = OrientationHistogram2D::from_values(raw.values).ok().and_then(|mut h| h.normalize().ok().map(|_| h));
    (occ, h2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::angles::bin_center;
    use crate::raster::{Image, LABEL_BACKGROUND};
    use nalgebra::Point3;

    fn small_views() -> Vec<TrainingView> {
        let target = Point3::new(0.0, 0.0, 0.0);
        let mut views = Vec::new();
        for (i, eye) in [Point3::new(0.0, 0.0, -0.5), Point3::new(0.5, 0.1, 0.0), Point3::new(0.1, -0.5, 0.05)].iter().enumerate() {
            let cam = Camera::look_at(*eye, target, nalgebra::Vector3::new(0.0, 1.0, 0.0), 0.25, 8, 8);
            let mut mask = Image::filled(8, 8, LABEL_BACKGROUND);
            let mut mask2 = Image::filled(8, 8, LABEL_BODY);
            let mut img = Image::filled(8, 8, [0.2; 3]);
            for y in 2..6 {
                for x in 2..6 {
                    mask.set(x, y, LABEL_HAIR);
                    mask2.set(x, y, if (x + y + i as u32) % 3 == 0 { LABEL_BACKGROUND } else { LABEL_HAIR });
                    img.set(x, y, [0.6, 0.4, 0.2]);
                }
            }
            let mut ori = OrientationMap::empty(8, 8, 64);
            for y in 2..6 {
                for x in 2..6 {
                    let h: Vec<f32> = (0..64)
                        .map(|b| {
                            let d = (b as f32 - (10.0 + 5.0 * i as f32 + x as f32)).abs();
                            (-d * d / 20.0).exp() + 0.5 * (-(b as f32 - 45.0).powi(2) / 8.0).exp()
                        })
                        .collect();
                    ori.set_histogram(x, y, &h, 1.0);
                }
            }
            views.push(TrainingView {
                camera: cam,
                image: img,
                masks: vec![mask, mask2],
                orientation: ori,
            });
        }
        views
    }

    fn small_field(seed: u64) -> HairField {
        let bbox = HairBBox::new(Point3::new(-0.05, -0.05, -0.05), Point3::new(0.05, 0.05, 0.05)).unwrap();
        let mut f = HairField::new([4, 4, 4], bbox);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..f.len() {
            f.sigma[i] = rng.gen_range(0.05..0.6);
            f.rho_h[i] = rng.gen_range(0.1..0.9);
            f.rho_b[i] = rng.gen_range(0.1..0.9);
            f.theta[i] = rng.gen_range(0.5..2.0);
            f.phi[i] = rng.gen_range(0.5..2.0);
            f.rgb[i] = [rng.gen(), rng.gen(), rng.gen()];
        }
        f
    }

    fn channel_mut(f: &mut HairField, ch: usize) -> &mut Vec<f64> {
        match ch {
            CH_SIGMA => &mut f.sigma,
            CH_RHO_H => &mut f.rho_h,
            CH_RHO_B => &mut f.rho_b,
            CH_THETA => &mut f.theta,
            _ => &mut f.phi,
        }
    }

    fn grad_cfg() -> FieldConfig {
        FieldConfig {
            grid: [4; 3],
            samples_per_ray: 12,
            density_scale: 30.0,
            weight_threshold: 0.0,
            parallel: false,
            ..Default::default()
        }
    }

    #[test]
    fn structure_gradient_matches_finite_differences() {
        let views = small_views();
        let problem = FieldProblem::new(&views, grad_cfg()).unwrap();
        let field = small_field(3);
        let rays: Vec<PixelRay> = [(0u32, 3u32, 3u32), (1, 4, 3), (2, 3, 4)]
            .iter()
            .map(|&(v, x, y)| {
                let (o, d) = views[v as usize].camera.pixel_center_ray(x, y);
                PixelRay {
                    view: v,
                    x,
                    y,
                    range: field.bbox.clip_ray(&o, &d).expect("test rays hit the box"),
                }
            })
            .collect();
        let (_, grad) = problem.structure_loss(&field, &rays);
        let h = 1e-4;
        let mut checked = 0;
        for ch in [CH_SIGMA, CH_RHO_H, CH_RHO_B, CH_THETA, CH_PHI] {
            for i in 0..field.len() {
                // Fourth-order central stencil: the kernel core is only a
                // few 1e-3 rad wide, so the two-point rule is too coarse.
                let at = |off: f64| {
                    let mut f = field.clone();
                    channel_mut(&mut f, ch)[i] += off;
                    problem.structure_loss(&f, &rays).0
                };
                let num = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                let ana = grad.channels[ch][i];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-4);
                assert!(err < 1e-3, "channel {ch} voxel {i}: analytic {ana} numeric {num}");
                if ana != 0.0 {
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "only {checked} nonzero gradient entries");
    }

    #[test]
    fn phase_two_leaves_density_and_radiance_untouched() {
        let views = small_views();
        let bbox = HairBBox::new(Point3::new(-0.05, -0.05, -0.05), Point3::new(0.05, 0.05, 0.05)).unwrap();
        let cfg = FieldConfig {
            grid: [4; 3],
            phase1_steps: 0,
            phase2_steps: 5,
            rays_per_batch: 32,
            samples_per_ray: 16,
            density_scale: 30.0,
            parallel: false,
            ..Default::default()
        };
        let mut field = HairField { bbox, ..small_field(5) };
        let before = (field.sigma.clone(), field.rgb.clone());
        fit_field(&mut field, &views, &cfg, false).unwrap();
        assert_eq!(before.0, field.sigma);
        assert_eq!(before.1, field.rgb);
        assert!(field.is_valid());
    }

    #[test]
    fn photometric_label_is_the_source_majority() {
        let mut views = small_views();
        let v = &mut views[0];
        v.masks = vec![Image::filled(8, 8, LABEL_BACKGROUND), Image::filled(8, 8, LABEL_HAIR), Image::filled(8, 8, LABEL_HAIR)];
        v.masks[1].set(1, 1, LABEL_BODY);
        let problem = FieldProblem::new(&views, grad_cfg()).unwrap();
        let ray = |x, y| PixelRay { view: 0, x, y, range: (0.0, 1.0) };
        assert_eq!(problem.majority_label(&ray(0, 0)), LABEL_HAIR);
        // One vote each: the first source wins.
        assert_eq!(problem.majority_label(&ray(1, 1)), LABEL_BACKGROUND);
        assert_eq!(problem.majority_label(&PixelRay { view: 1, ..ray(3, 3) }), *views[1].masks[0].get(3, 3));
    }

    #[test]
    fn rays_missing_the_box_are_an_empty_volume() {
        let views = small_views();
        let far = HairBBox::new(Point3::new(10.0, 10.0, 10.0), Point3::new(11.0, 11.0, 11.0)).unwrap();
        let cfg = FieldConfig {
            grid: [4; 3],
            ..grad_cfg()
        };
        assert!(matches!(optimize_field(&views, far, &cfg), Err(Error::EmptyVolume)));
    }

    #[test]
    fn background_only_scene_drives_hair_occupancy_down() {
        let mut views = small_views();
        for v in &mut views {
            for m in &mut v.masks {
                *m = Image::filled(8, 8, LABEL_BACKGROUND);
            }
            v.orientation = OrientationMap::empty(8, 8, 64);
        }
        let bbox = HairBBox::new(Point3::new(-0.05, -0.05, -0.05), Point3::new(0.05, 0.05, 0.05)).unwrap();
        let cfg = FieldConfig {
            grid: [4; 3],
            phase1_steps: 60,
            phase2_steps: 150,
            rays_per_batch: 64,
            samples_per_ray: 16,
            density_scale: 30.0,
            parallel: false,
            ..Default::default()
        };
        let (field, _) = optimize_field(&views, bbox, &cfg).unwrap();
        let table = ProjectionTable::new(&views[0].camera, 64);
        let kernel = OrientationKernel::new(cfg.kernel);
        for v in &views {
            for y in 0..8 {
                for x in 0..8 {
                    let (occ, _) = render_pixel(&field, &v.camera, &table, &kernel, &cfg, x, y);
                    assert!(occ.psi_h < 0.05, "psi_h {} at {x},{y}", occ.psi_h);
                }
            }
        }
    }

    #[test]
    fn single_voxel_peak_projects_exactly() {
        let bbox = HairBBox::new(Point3::new(-0.05, -0.05, -0.05), Point3::new(0.05, 0.05, 0.05)).unwrap();
        let mut f = HairField::new([1, 1, 1], bbox);
        f.sigma[0] = 1.0;
        let (t, ph) = (bin_center(22, 64), bin_center(8, 64));
        f.theta[0] = t;
        f.phi[0] = ph;
        let views = small_views();
        let cfg = grad_cfg();
        let kernel = OrientationKernel::new(cfg.kernel);
        for v in &views {
            let table = ProjectionTable::new(&v.camera, 64);
            let (_, h) = render_pixel(&f, &v.camera, &table, &kernel, &cfg, 4, 4);
            let expect = crate::geom::angles::angle_bin(v.camera.project_direction(&crate::geom::angles::direction(t, ph)).unwrap(), 64);
            assert_eq!(h.unwrap().argmax(), expect);
        }
    }
}
