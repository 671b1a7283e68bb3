//! Photometric strand refinement with adaptive density control.

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::control::{prune_strands, split_strands, subsample_for_render, PruneStats};
use super::loss::{body_radius_loss, diameter_loss, latent_loss, penetration, volume_guidance};
use super::primitive::{disc_radius_grad, BodyGaussians, GaussianPrimitive};
use super::splat::{render, render_loss_grad, PrimitiveGrad};
use super::strand::{AppearanceInit, AppearanceMode, ChainedGaussianStrand, StrandGrad};
use crate::error::{Error, Result};
use crate::geom::{Camera, Strand, TriMesh};
use crate::hairfield::HairField;
use crate::latent::StrandLatentModel;
use crate::optim::Adam;
use crate::parallel::{map_ordered, sub_seed};
use crate::raster::{LabelMask, RgbImage, LABEL_BACKGROUND, LABEL_BODY, LABEL_HAIR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub steps: usize,
    /// Prune and split after every this many steps (0 disables).
    pub control_every: usize,
    pub lr_latent: f64,
    pub lr_appearance: f64,
    pub weight_image: f64,
    pub weight_guidance: f64,
    pub weight_penetration: f64,
    /// Initial diameter weight; multiplied by `diameter_weight_growth`
    /// after each split.
    pub weight_diameter: f64,
    pub diameter_weight_growth: f64,
    pub weight_latent: f64,
    pub weight_body: f64,
    /// Score multiplier of the closing split; 0 skips it.
    pub final_split_scale: f64,
    /// Traced strands kept as the starting set, sampled uniformly; `None`
    /// keeps all of them.
    pub initial_strands: Option<usize>,
    /// Strand capacity during periodic splits.
    pub max_strands: Option<usize>,
    pub min_opacity: f64,
    pub initial_diameter: f64,
    pub initial_opacity: f64,
    /// Fraction of strands rendered per step.
    pub render_fraction: f64,
    /// Views rendered per step; 0 uses all.
    pub views_per_step: usize,
    pub key_color: [f64; 3],
    pub appearance: AppearanceMode,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            control_every: 200,
            lr_latent: 1e-2,
            lr_appearance: 1e-3,
            weight_image: 1.0,
            weight_guidance: 1.0,
            weight_penetration: 0.05,
            weight_diameter: 1.0,
            diameter_weight_growth: 2.0,
            weight_latent: 1.0,
            weight_body: 1000.0,
            final_split_scale: 3.0,
            initial_strands: Some(300),
            max_strands: Some(500),
            min_opacity: 0.1,
            initial_diameter: 1e-4,
            initial_opacity: 0.8,
            render_fraction: 1.0,
            views_per_step: 4,
            key_color: [0.0, 1.0, 0.0],
            appearance: AppearanceMode::Anchored,
            seed: 0,
            parallel: true,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.lr_latent, self.lr_appearance, self.initial_diameter, self.diameter_weight_growth];
        if pos.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::contract("learning rates, initial diameter and diameter growth must be positive"));
        }
        let w = [
            self.weight_image,
            self.weight_guidance,
            self.weight_penetration,
            self.weight_diameter,
            self.weight_latent,
            self.weight_body,
            self.final_split_scale,
        ];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if !(self.render_fraction > 0.0 && self.render_fraction <= 1.0) {
            return Err(Error::contract("render_fraction must lie in (0, 1]"));
        }
        if self.initial_strands == Some(0) {
            return Err(Error::contract("initial_strands must be positive"));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::contract("initial_opacity must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A calibrated view with its reference image, body pixels already
/// painted with the key color.
#[derive(Clone, Debug)]
pub struct RefineView {
    pub camera: Camera,
    pub reference: RgbImage,
}

/// Copy of `image` with body-labelled pixels set to `key`.
pub fn paint_body(image: &RgbImage, mask: &LabelMask, key: [f64; 3]) -> RgbImage {
    let mut out = image.clone();
    for (c, &l) in out.data.iter_mut().zip(&mask.data) {
        if l == LABEL_BODY {
            *c = key;
        }
    }
    out
}

/// Mean color of pixels carrying `label` over all images.
pub fn mean_label_color(images: &[(&RgbImage, &LabelMask)], label: u8) -> Option<[f64; 3]> {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (img, mask) in images {
        for (c, &l) in img.data.iter().zip(&mask.data) {
            if l == label {
                (0..3).for_each(|k| acc[k] += c[k]);
                n += 1;
            }
        }
    }
    (n > 0).then(|| acc.map(|v| v / n as f64))
}

pub fn background_color(images: &[(&RgbImage, &LabelMask)]) -> [f64; 3] {
    mean_label_color(images, LABEL_BACKGROUND).unwrap_or([0.0; 3])
}

pub fn hair_color(images: &[(&RgbImage, &LabelMask)]) -> [f64; 3] {
    mean_label_color(images, LABEL_HAIR).unwrap_or([0.5; 3])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(rename = "L_i")]
    pub image: f64,
    #[serde(rename = "L_n")]
    pub guidance: f64,
    #[serde(rename = "L_p")]
    pub penetration: f64,
    #[serde(rename = "L_d")]
    pub diameter: f64,
    #[serde(rename = "L_l")]
    pub latent: f64,
    #[serde(rename = "L_b")]
    pub body: f64,
    pub strands: usize,
}

pub fn write_loss_csv(path: &std::path::Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("CSV", e.to_string()))?;
    for r in log {
        w.serialize(r).map_err(|e| Error::format("CSV", e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub step: usize,
    pub before: usize,
    pub pruned: PruneStats,
    pub after: usize,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub strands: Vec<Strand>,
    pub gaussians: Vec<ChainedGaussianStrand>,
    pub body: BodyGaussians,
    pub log: Vec<LossRecord>,
    pub control: Vec<ControlEvent>,
    /// Strand count before the closing split.
    pub scheduled_strands: usize,
}

enum Owner {
    Strand(usize, usize),
    Body(usize),
}

/// Refinement state; `step` advances one iteration.
pub struct Refiner<'a> {
    cfg: RefineConfig,
    model: &'a StrandLatentModel,
    field: &'a HairField,
    inner: &'a TriMesh,
    views: &'a [RefineView],
    background: [f64; 3],
    strands: Vec<ChainedGaussianStrand>,
    body: BodyGaussians,
    adam_latent: Adam,
    adam_appearance: Adam,
    adam_body: Adam,
    weight_diameter: f64,
    step: usize,
    log: Vec<LossRecord>,
    control: Vec<ControlEvent>,
}

impl<'a> Refiner<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        initial: &[Strand],
        model: &'a StrandLatentModel,
        field: &'a HairField,
        inner: &'a TriMesh,
        views: &'a [RefineView],
        background: [f64; 3],
        hair_color: [f64; 3],
        cfg: &RefineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if views.is_empty() {
            return Err(Error::contract("refinement needs at least one view"));
        }
        if initial.iter().any(|s| !s.root_on_scalp) {
            return Err(Error::contract("refinement expects scalp-rooted strands"));
        }
        let init = AppearanceInit { diameter: cfg.initial_diameter, opacity: cfg.initial_opacity, color: hair_color };
        let strands = initial
            .iter()
            .map(|s| ChainedGaussianStrand::from_strand(s, model, cfg.appearance, &init))
            .collect::<Result<Vec<_>>>()?;
        let body = BodyGaussians::from_mesh(inner, cfg.key_color);
        let mut r = Self {
            cfg: cfg.clone(),
            model,
            field,
            inner,
            views,
            background,
            adam_latent: Adam::new(0, cfg.lr_latent),
            adam_appearance: Adam::new(0, cfg.lr_appearance),
            adam_body: Adam::new(body.len(), cfg.lr_appearance),
            strands,
            body,
            weight_diameter: cfg.weight_diameter,
            step: 0,
            log: Vec::new(),
            control: Vec::new(),
        };
        r.adam_latent = Adam::new(r.latent_len(), cfg.lr_latent);
        r.adam_appearance = Adam::new(r.appearance_len(), cfg.lr_appearance);
        Ok(r)
    }

    fn latent_stride(&self) -> usize {
        self.model.dim()
    }

    fn appearance_stride(&self) -> usize {
        self.strands.first().map_or(0, |s| s.appearance_count())
    }

    fn latent_len(&self) -> usize {
        self.strands.len() * self.latent_stride()
    }

    fn appearance_len(&self) -> usize {
        self.strands.len() * self.appearance_stride()
    }

    pub fn strands(&self) -> &[ChainedGaussianStrand] {
        &self.strands
    }

    pub fn strands_mut(&mut self) -> &mut [ChainedGaussianStrand] {
        &mut self.strands
    }

    pub fn body(&self) -> &BodyGaussians {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut BodyGaussians {
        &mut self.body
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn decoded(&self) -> Vec<Strand> {
        map_ordered(self.cfg.parallel, &self.strands, |_, s| s.strand(self.model))
    }

    /// All Gaussians of the current state.
    pub fn primitives(&self) -> Vec<GaussianPrimitive> {
        let mut out: Vec<GaussianPrimitive> = map_ordered(self.cfg.parallel, &self.strands, |_, s| {
            s.expand(&s.vertices(self.model)).into_iter().map(|(_, g)| g).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        out.extend(self.body.primitives());
        out
    }

    pub fn render_view(&self, camera: &Camera) -> RgbImage {
        render(&self.primitives(), camera, self.background, self.cfg.parallel)
    }

    /// Total loss and parameter gradients at the current state:
    /// `(record, latent grads, appearance grads, body radius grads)`.
    pub fn evaluate(&self, views: &[usize], render_set: &[usize]) -> (LossRecord, Vec<f64>, Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let n = self.strands.len();
        let verts = map_ordered(cfg.parallel, &self.strands, |_, s| s.vertices(self.model));
        let mut prims = Vec::new();
        let mut owners = Vec::new();
        for &i in render_set {
            for (j, g) in self.strands[i].expand(&verts[i]) {
                prims.push(g);
                owners.push(Owner::Strand(i, j));
            }
        }
        for b in 0..self.body.len() {
            prims.push(self.body.primitive(b));
            owners.push(Owner::Body(b));
        }
        let mut image = 0.0;
        let mut pgrad = vec![PrimitiveGrad::default(); prims.len()];
        if cfg.weight_image > 0.0 {
            let scale = cfg.weight_image / views.len() as f64;
            for &v in views {
                let view = &self.views[v];
                let (_, loss, g) = render_loss_grad(&prims, &view.camera, self.background, &view.reference, cfg.parallel);
                image += loss / views.len() as f64;
                for (acc, gi) in pgrad.iter_mut().zip(&g) {
                    acc.center += gi.center * scale;
                    acc.covariance += gi.covariance * scale;
                    acc.opacity += gi.opacity * scale;
                    for c in 0..3 {
                        acc.color[c] += gi.color[c] * scale;
                    }
                }
            }
        }
        let nv = self.model.vertices();
        let mut sgrads: Vec<StrandGrad> = (0..n).map(|_| StrandGrad::zeros(nv)).collect();
        let mut body_grad = vec![0.0; self.body.len()];
        for (o, g) in owners.iter().zip(&pgrad) {
            match *o {
                Owner::Strand(i, j) => self.strands[i].accumulate_segment_grad(&verts[i], j, g, &mut sgrads[i]),
                Owner::Body(b) => {
                    body_grad[b] += disc_radius_grad(&self.body.normals[b], self.body.radii[b], &g.covariance)
                }
            }
        }
        let inv_n = 1.0 / n.max(1) as f64;
        let regs = map_ordered(cfg.parallel, &self.strands, |i, s| {
            let (ln, gn) = volume_guidance(&verts[i], self.field);
            let (lp, gp) = penetration(&verts[i], self.inner);
            let (ld, gd) = diameter_loss(&s.diameters());
            let (ll, gl) = latent_loss(&s.latent, &s.latent_init);
            (ln, gn, lp, gp, ld, gd, ll, gl)
        });
        let mut rec = LossRecord { step: self.step, image, strands: n, ..Default::default() };
        let ks = self.latent_stride();
        let as_ = self.appearance_stride();
        let mut g_lat = vec![0.0; n * ks];
        let mut g_app = vec![0.0; n * as_];
        for (i, (ln, gn, lp, gp, ld, gd, ll, gl)) in regs.into_iter().enumerate() {
            rec.guidance += ln * inv_n;
            rec.penetration += lp * inv_n;
            rec.diameter += ld * inv_n;
            rec.latent += ll * inv_n;
            let sg = &mut sgrads[i];
            for k in 0..nv {
                sg.vertices[k] += gn[k] * (cfg.weight_guidance * inv_n) + gp[k] * (cfg.weight_penetration * inv_n);
            }
            for (d, g) in sg.diameters.iter_mut().zip(&gd) {
                *d += g * self.weight_diameter * inv_n;
            }
            let s = &self.strands[i];
            let lg: DVector<f64> = s.latent_grad(self.model, sg) + gl * (cfg.weight_latent * inv_n);
            g_lat[i * ks..(i + 1) * ks].copy_from_slice(lg.as_slice());
            g_app[i * as_..(i + 1) * as_].copy_from_slice(&s.appearance_grad(sg));
        }
        let (lb, gb) = body_radius_loss(&self.body.radii, &self.body.initial_radii);
        rec.body = lb;
        for (g, b) in body_grad.iter_mut().zip(&gb) {
            *g += b * cfg.weight_body;
        }
        (rec, g_lat, g_app, body_grad)
    }

    pub fn total(&self, r: &LossRecord) -> f64 {
        let c = &self.cfg;
        c.weight_image * r.image
            + c.weight_guidance * r.guidance
            + c.weight_penetration * r.penetration
            + self.weight_diameter * r.diameter
            + c.weight_latent * r.latent
            + c.weight_body * r.body
    }

    fn step_views(&self) -> Vec<usize> {
        let nv = self.views.len();
        let k = self.cfg.views_per_step;
        if k == 0 || k >= nv {
            return (0..nv).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.cfg.seed, 0x71E3, self.step as u64));
        let mut v = sample(&mut rng, nv, k).into_vec();
        v.sort_unstable();
        v
    }

    /// One optimization step, followed by density control when due.
    pub fn step(&mut self) -> Result<LossRecord> {
        let views = self.step_views();
        let set = subsample_for_render(self.strands.len(), self.cfg.render_fraction, sub_seed(self.cfg.seed, 0x5B5E, self.step as u64));
        let (rec, g_lat, g_app, g_body) = self.evaluate(&views, &set);
        let total = self.total(&rec);
        if !total.is_finite() || g_lat.iter().chain(&g_app).chain(&g_body).any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: self.step, what: "refinement loss".into() });
        }
        let ks = self.latent_stride();
        let as_ = self.appearance_stride();
        let mut lat: Vec<f64> = self.strands.iter().flat_map(|s| s.latent.iter().copied()).collect();
        let mut app: Vec<f64> = self.strands.iter().flat_map(|s| s.appearance_params()).collect();
        self.adam_latent.step(&mut lat, &g_lat);
        self.adam_appearance.step(&mut app, &g_app);
        self.adam_body.step(&mut self.body.radii, &g_body);
        for (i, s) in self.strands.iter_mut().enumerate() {
            s.latent.copy_from_slice(&lat[i * ks..(i + 1) * ks]);
            s.set_appearance_params(&app[i * as_..(i + 1) * as_]);
            for c in s.colors.iter_mut().flatten() {
                *c = c.clamp(0.0, 1.0);
            }
        }
        self.log.push(rec);
        self.step += 1;
        let every = self.cfg.control_every;
        if every > 0 && self.step % every == 0 && self.step < self.cfg.steps {
            self.control(1.0, self.cfg.max_strands);
            self.weight_diameter *= self.cfg.diameter_weight_growth;
        }
        Ok(rec)
    }

    /// Prune, then split with scores scaled by `scale`.
    pub fn control(&mut self, scale: f64, capacity: Option<usize>) {
        let before = self.strands.len();
        let (kept, source, pruned) = prune_strands(&self.strands, self.model, self.background, self.cfg.min_opacity);
        let (split, parents) = if kept.is_empty() {
            (kept, Vec::new())
        } else {
            split_strands(&kept, self.model, scale, capacity, sub_seed(self.cfg.seed, 0x5B11, self.step as u64))
        };
        let origin: Vec<usize> = parents.iter().map(|&p| source[p]).collect();
        let remap = |stride: usize| -> Vec<Option<usize>> {
            origin.iter().flat_map(|&o| (0..stride).map(move |k| Some(o * stride + k))).collect()
        };
        self.adam_latent.remap(&remap(self.latent_stride()));
        let as_ = self.appearance_stride();
        self.adam_appearance.remap(&remap(as_));
        self.strands = split;
        self.control.push(ControlEvent { step: self.step, before, pruned, after: self.strands.len() });
    }

    /// Runs the remaining schedule and the closing split.
    pub fn run(mut self) -> Result<RefineResult> {
        while self.step < self.cfg.steps {
            let r = self.step()?;
            if self.step % 50 == 0 || self.step == self.cfg.steps {
                log::info!(
                    "refine step {}: L_i {:.3e} L_n {:.3e} L_p {:.3e} strands {}",
                    r.step,
                    r.image,
                    r.guidance,
                    r.penetration,
                    r.strands
                );
            }
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> RefineResult {
        let scheduled = self.strands.len();
        if self.cfg.final_split_scale > 0.0 && !self.strands.is_empty() {
            self.control(self.cfg.final_split_scale, None);
        }
        RefineResult {
            strands: self.decoded(),
            gaussians: self.strands,
            body: self.body,
            log: self.log,
            control: self.control,
            scheduled_strands: scheduled,
        }
    }
}
