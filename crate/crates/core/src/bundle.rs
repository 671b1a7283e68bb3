//! Capture bundle: calibrated views, label masks and head meshes in one
//! directory.
//!
//! Layout: `images/NNN.png`, `masks/NNN.png` (extra segmentation sources
//! in `masks_1/`, `masks_2/`, ...), `cameras.txt`, `inner.obj`,
//! `outer.obj`, `scalp.txt` (inner-mesh vertex indices), `bbox.txt` and an
//! optional `parting.txt`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::camera::{read_cameras, write_cameras};
use crate::geom::{Camera, HairBBox, TriMesh};
use crate::raster::{downsample_mask, downsample_rgb, load_mask_png, load_rgb_png, save_mask_png, save_rgb_png, LabelMask, RgbImage};
use crate::tracer::PartingLine;

#[derive(Clone, Debug)]
pub struct CaptureBundle {
    pub cameras: Vec<Camera>,
    pub images: Vec<RgbImage>,
    /// `masks[source][view]`; source 0 is the primary segmentation.
    pub masks: Vec<Vec<LabelMask>>,
    pub inner: TriMesh,
    pub outer: TriMesh,
    pub scalp: Vec<u32>,
    pub bbox: HairBBox,
    pub parting: Option<PartingLine>,
}

fn view_name(i: usize) -> String {
    format!("{i:03}.png")
}

fn mask_dir(source: usize) -> String {
    if source == 0 {
        "masks".into()
    } else {
        format!("masks_{source}")
    }
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact { path: p, stage: "synth" })
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

impl CaptureBundle {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if n == 0 {
            return Err(Error::contract("bundle has no views"));
        }
        if self.images.len() != n || self.masks.is_empty() || self.masks.iter().any(|m| m.len() != n) {
            return Err(Error::contract("image and mask counts must match the camera count"));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            let img = &self.images[i];
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(Error::contract(format!("view {i}: image size differs from the camera")));
            }
            if self.masks.iter().any(|m| !m[i].same_size(img)) {
                return Err(Error::contract(format!("view {i}: mask size differs from the image")));
            }
        }
        if let Some(&bad) = self.scalp.iter().find(|&&v| v as usize >= self.inner.vertices.len()) {
            return Err(Error::contract(format!("scalp vertex {bad} is not an inner-mesh vertex")));
        }
        if let Some(p) = &self.parting {
            if p.view >= n {
                return Err(Error::contract("parting line refers to a missing view"));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir.join("images"))?;
        for (i, img) in self.images.iter().enumerate() {
            save_rgb_png(&dir.join("images").join(view_name(i)), img)?;
        }
        for (s, masks) in self.masks.iter().enumerate() {
            let d = dir.join(mask_dir(s));
            std::fs::create_dir_all(&d)?;
            for (i, m) in masks.iter().enumerate() {
                save_mask_png(&d.join(view_name(i)), m)?;
            }
        }
        write_cameras(&dir.join("cameras.txt"), &self.cameras)?;
        self.inner.write_obj(&dir.join("inner.obj"))?;
        self.outer.write_obj(&dir.join("outer.obj"))?;
        let scalp: String = self.scalp.iter().map(|v| format!("{v}\n")).collect();
        std::fs::write(dir.join("scalp.txt"), scalp)?;
        std::fs::write(dir.join("bbox.txt"), self.bbox.to_text())?;
        if let Some(p) = &self.parting {
            p.write(&dir.join("parting.txt"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cameras = read_cameras(&require(dir, "cameras.txt")?)?;
        let images = (0..cameras.len())
            .map(|i| load_rgb_png(&require(dir, &format!("images/{}", view_name(i)))?))
            .collect::<Result<Vec<_>>>()?;
        let mut masks = Vec::new();
        for s in 0.. {
            let d = mask_dir(s);
            if s > 0 && !dir.join(&d).is_dir() {
                break;
            }
            masks.push(
                (0..cameras.len())
                    .map(|i| load_mask_png(&require(dir, &format!("{d}/{}", view_name(i)))?))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let inner = TriMesh::read_obj(&require(dir, "inner.obj")?)?;
        let outer = TriMesh::read_obj(&require(dir, "outer.obj")?)?;
        let scalp_path = require(dir, "scalp.txt")?;
        let scalp = std::fs::read_to_string(&scalp_path)?
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| parse_err(&scalp_path, format!("bad vertex index `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let bbox_path = require(dir, "bbox.txt")?;
        let bbox = HairBBox::parse(&std::fs::read_to_string(&bbox_path)?).map_err(|m| parse_err(&bbox_path, m))?;
        let parting_path = dir.join("parting.txt");
        let parting = if parting_path.exists() { Some(PartingLine::read(&parting_path)?) } else { None };
        let b = Self {
            cameras,
            images,
            masks,
            inner,
            outer,
            scalp,
            bbox,
            parting,
        };
        b.validate()?;
        Ok(b)
    }

    /// Box-downsampled copy; intrinsics and the parting annotation are
    /// rescaled to match.
    pub fn downsampled(&self, factor: u32) -> Result<Self> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let s = 1.0 / factor as f64;
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                let mut k = c.intrinsics;
                for col in 0..3 {
                    k[(0, col)] *= s;
                    k[(1, col)] *= s;
                }
                Camera::new(k, c.extrinsics(), c.width / factor, c.height / factor)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut parting = self.parting.clone();
        if let Some(p) = &mut parting {
            p.points.iter_mut().for_each(|q| *q = nalgebra::Point2::from(q.coords * s));
        }
        Ok(Self {
            cameras,
            images: self.images.iter().map(|i| downsample_rgb(i, factor)).collect(),
            masks: self.masks.iter().map(|src| src.iter().map(|m| downsample_mask(m, factor)).collect()).collect(),
            inner: self.inner.clone(),
            outer: self.outer.clone(),
            scalp: self.scalp.clone(),
            bbox: self.bbox,
            parting,
        })
    }
}
