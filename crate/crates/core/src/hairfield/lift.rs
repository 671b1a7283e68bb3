//! Orientation start values from multi-view votes.
//!
//! Every occupied voxel scores each 3D bin by the reference mass its
//! projection lands on in every view, weighted by how much of the voxel
//! the view actually sees. The best bin becomes the voxel's angles.

use crate::geom::angles::bin_center;
use crate::parallel::map_ordered;

use super::field::HairField;
use super::optimize::FieldProblem;

/// Transmittance from the camera up to (not including) the cell at `p`.
fn transmittance(field: &HairField, origin: nalgebra::Point3<f64>, p: &nalgebra::Point3<f64>, density_scale: f64) -> f64 {
    let to = p - origin;
    let dist = to.norm();
    let dir = to / dist;
    let Some((t0, _)) = field.bbox.clip_ray(&origin, &dir) else {
        return 1.0;
    };
    let cell = field.cell();
    let step = cell.x.min(cell.y).min(cell.z);
    let stop = dist - cell.norm();
    let mut optical = 0.0;
    let mut t = t0 + 0.5 * step;
    while t < stop {
        if let Some(st) = field.stencil(&(origin + dir * t)) {
            let sigma: f64 = st.idx.iter().zip(&st.w).map(|(&i, &w)| w * field.sigma[i as usize]).sum();
            optical += density_scale * sigma * step;
        }
        t += step;
    }
    (-optical).exp()
}

/// Overwrites the angles of occupied voxels with their best-voted bin.
/// Returns how many voxels received a vote.
pub fn lift_orientations(field: &mut HairField, problem: &FieldProblem) -> usize {
    let cfg = &problem.cfg;
    let bins = problem.kernel.bins();
    let cell = field.cell();
    let depth = cell.x.min(cell.y).min(cell.z);
    let min_sigma = -(1.0 - cfg.lift_min_opacity).ln() / (cfg.density_scale * depth);
    let [nx, ny, nz] = field.dims;
    let occupied: Vec<[usize; 3]> = (0..nz)
        .flat_map(|k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i, j, k])))
        .filter(|&[i, j, k]| field.sigma[field.index(i, j, k)] >= min_sigma)
        .collect();

    let fld: &HairField = field;
    let votes = map_ordered(cfg.parallel, &occupied, |_, &[i, j, k]| {
        let p = fld.voxel_center(i, j, k);
        let mut score = vec![0.0; bins * bins];
        let mut any = false;
        for (v, view) in problem.views.iter().enumerate() {
            let Ok(px) = view.camera.project_point(&p) else { continue };
            if px.x < 0.0 || px.y < 0.0 {
                continue;
            }
            let (x, y) = (px.x as u32, px.y as u32);
            if x >= view.camera.width || y >= view.camera.height {
                continue;
            }
            let Some(reference) = problem.reference_at(v, x, y) else { continue };
            let t = transmittance(fld, view.camera.center(), &p, cfg.density_scale);
            if t <= 1e-6 {
                continue;
            }
            any = true;
            let table = &problem.tables[v];
            for ta in 0..bins {
                for pb in 0..bins {
                    if let Some(e) = table.image_bin(ta, pb) {
                        score[ta * bins + pb] += t * reference[e];
                    }
                }
            }
        }
        if !any {
            return None;
        }
        let best = (0..score.len()).max_by(|&a, &b| score[a].total_cmp(&score[b]).then(b.cmp(&a)))?;
        Some((bin_center(best / bins, bins), bin_center(best % bins, bins)))
    });

    let mut lifted = 0;
    for (&[i, j, k], vote) in occupied.iter().zip(votes) {
        if let Some((theta, phi)) = vote {
            let id = field.index(i, j, k);
            field.theta[id] = theta;
            field.phi[id] = phi;
            lifted += 1;
        }
    }
    lifted
}
