//! Voxel-query-to-image projection: which query cells land inside each view,
//! and where.

use crate::error::Result;

use super::{CameraRig, HitSet, HitSlot, WorldBounds};

/// Fixed per-view slot budget: 90% of the cell count, rounded up.
pub fn hit_capacity(grid_extents: [usize; 3]) -> usize {
    let n: usize = grid_extents.iter().product();
    (0.9 * n as f64).ceil() as usize
}

/// Projects every query-cell center into every view.
///
/// A cell is hit iff its center has strictly positive camera-frame depth and
/// lands inside the image rectangle; `q_c` is the normalized pixel position
/// in `[0,1]^2`. Per-view lists are filled in canonical cell order, truncated
/// at the slot budget, and padded with invalid slots.
pub fn project_voxels(
    rig: &CameraRig,
    grid_extents: [usize; 3],
    bounds: &WorldBounds,
) -> Result<HitSet> {
    rig.validate()?;
    bounds.validate()?;
    let k = hit_capacity(grid_extents);
    let [h, w, z] = grid_extents;

    let mut views = Vec::with_capacity(rig.num_views());
    for cam in &rig.cameras {
        let mut slots: Vec<HitSlot> = Vec::with_capacity(k);
        'cells: for zc in 0..z {
            for yc in 0..w {
                for xc in 0..h {
                    let p = bounds.cell_center(grid_extents, [xc, yc, zc]);
                    let Some((u, v, _depth)) = cam.project(p) else { continue };
                    if u < 0.0 || u >= cam.image_w as f64 || v < 0.0 || v >= cam.image_h as f64 {
                        continue;
                    }
                    slots.push(HitSlot {
                        query_index: xc + h * (yc + w * zc),
                        q_c: [u / cam.image_w as f64, v / cam.image_h as f64],
                        valid: true,
                    });
                    if slots.len() == k {
                        break 'cells;
                    }
                }
            }
        }
        while slots.len() < k {
            slots.push(HitSlot { query_index: 0, q_c: [0.0, 0.0], valid: false });
        }
        views.push(slots);
    }
    Ok(HitSet { views, k })
}
