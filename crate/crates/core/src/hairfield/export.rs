//! Debug exports: rendered hair occupancy, projected argmax angles and an
//! oriented segment cloud of the densest voxels.

use std::fmt::Write as _;
use std::path::Path;

use super::field::HairField;
use super::kernel::OrientationKernel;
use super::optimize::{render_pixel, FieldConfig};
use super::projection::ProjectionTable;
use crate::error::Result;
use crate::geom::angles::bin_center;
use crate::geom::Camera;
use crate::parallel::map_ordered;
use crate::raster::{angle_color, GrayImage, Image, RgbImage};

/// Per-pixel ψ_h and argmax-angle images of one view.
pub fn render_view_maps(field: &HairField, camera: &Camera, cfg: &FieldConfig) -> (GrayImage, RgbImage) {
    let table = ProjectionTable::new(camera, cfg.kernel.bins);
    let kernel = OrientationKernel::new(cfg.kernel);
    let rows: Vec<u32> = (0..camera.height).collect();
    let out = map_ordered(cfg.parallel, &rows, |_, &y| {
        (0..camera.width)
            .map(|x| {
                let (occ, h) = render_pixel(field, camera, &table, &kernel, cfg, x, y);
                let color = match h {
                    Some(h) if occ.psi_h > 0.05 => angle_color(bin_center(h.argmax(), h.bins()), occ.psi_h.min(1.0)),
                    _ => [0.0; 3],
                };
                (occ.psi_h, color)
            })
            .collect::<Vec<_>>()
    });
    let mut psi = Image::filled(camera.width, camera.height, 0.0);
    let mut ang = Image::filled(camera.width, camera.height, [0.0; 3]);
    for (y, row) in out.into_iter().enumerate() {
        for (x, (p, c)) in row.into_iter().enumerate() {
            psi.set(x as u32, y as u32, p);
            ang.set(x as u32, y as u32, c);
        }
    }
    (psi, ang)
}

/// OBJ line segments (one per voxel, half a cell long each way) for the
/// voxels in the top `fraction` by σ·ρ_h.
pub fn oriented_point_cloud(field: &HairField, fraction: f64) -> String {
    let mut order: Vec<usize> = (0..field.len()).filter(|&i| field.sigma[i] > 0.0).collect();
    let score = |i: usize| field.sigma[i] * field.rho_h[i];
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let keep = ((order.len() as f64 * fraction).ceil() as usize).min(order.len());
    let half = 0.5 * field.cell().min();
    let (nx, ny) = (field.dims[0], field.dims[1]);
    let mut s = String::new();
    for (n, &i) in order[..keep].iter().enumerate() {
        let c = field.voxel_center(i % nx, (i / nx) % ny, i / (nx * ny));
        let d = crate::geom::direction(field.theta[i], field.phi[i]) * half;
        let (a, b) = (c - d, c + d);
        let _ = writeln!(s, "v {} {} {}\nv {} {} {}", a.x, a.y, a.z, b.x, b.y, b.z);
        let _ = writeln!(s, "l {} {}", 2 * n + 1, 2 * n + 2);
    }
    s
}

/// Writes `psi_h_XX.png` and `angles_XX.png` for every camera plus
/// `field_cloud.obj` into `dir`.
pub fn write_debug_exports(field: &HairField, cameras: &[Camera], cfg: &FieldConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, cam) in cameras.iter().enumerate() {
        let (psi, ang) = render_view_maps(field, cam, cfg);
        crate::raster::save_gray_png(&dir.join(format!("psi_h_{i:02}.png")), &psi)?;
        crate::raster::save_rgb_png(&dir.join(format!("angles_{i:02}.png")), &ang)?;
    }
    std::fs::write(dir.join("field_cloud.obj"), oriented_point_cloud(field, 0.05))?;
    Ok(())
}
