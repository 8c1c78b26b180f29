//! Raycast feature renderer (the stand-in for an image backbone).
//!
//! One ray per pixel marches through the occupancy grid to the first occupied
//! voxel. The pixel feature is a scaled one-hot class embedding plus a
//! normalized-depth channel; all remaining channels are zero before noise.
//! Gaussian noise of `noise_sigma` is added to every channel. Mask ids are
//! the owning primitive's index + 1, 0 for background.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::{StreamRng, Tensor};

use super::{Camera, CameraRig, FeatureMaps, GroundTruthMasks, SceneSample, WorldBounds};

/// Scale applied to the one-hot class embedding channel.
pub const EMBED_SCALE: f64 = 1.0;

/// First-hit query along a world ray: `(label, owner, distance)`.
pub fn raycast(
    scene: &SceneSample,
    bounds: &WorldBounds,
    origin: [f64; 3],
    dir: [f64; 3],
) -> Option<(u8, u16, f64)> {
    let ext = scene.occupancy.extents();
    let bext = bounds.extent();
    let cell = [
        bext[0] / ext[0] as f64,
        bext[1] / ext[1] as f64,
        bext[2] / ext[2] as f64,
    ];

    // Slab intersection with the world box.
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < bounds.min[a] || origin[a] > bounds.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((bounds.min[a] - origin[a]) * inv, (bounds.max[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 > t1 {
        return None;
    }

    // Start just inside the box and walk voxels (Amanatides & Woo).
    let t_start = t0 + 1e-9;
    let p = [
        origin[0] + t_start * dir[0],
        origin[1] + t_start * dir[1],
        origin[2] + t_start * dir[2],
    ];
    let mut v = [0i64; 3];
    for a in 0..3 {
        let g = ((p[a] - bounds.min[a]) / cell[a]).floor() as i64;
        v[a] = g.clamp(0, ext[a] as i64 - 1);
    }
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 1e-15 {
            step[a] = 1;
            let next = bounds.min[a] + (v[a] + 1) as f64 * cell[a];
            t_max[a] = (next - origin[a]) / dir[a];
            t_delta[a] = cell[a] / dir[a];
        } else if dir[a] < -1e-15 {
            step[a] = -1;
            let next = bounds.min[a] + v[a] as f64 * cell[a];
            t_max[a] = (next - origin[a]) / dir[a];
            t_delta[a] = -cell[a] / dir[a];
        }
    }

    let mut t_enter = t_start;
    let max_steps = ext[0] + ext[1] + ext[2] + 3;
    for _ in 0..max_steps {
        let (x, y, z) = (v[0] as usize, v[1] as usize, v[2] as usize);
        let idx = scene.occupancy.linear(x, y, z);
        let label = scene.occupancy.labels()[idx];
        if label != 0 {
            return Some((label, scene.owners[idx], t_enter.max(0.0)));
        }
        // Advance to the neighbouring voxel with the smallest exit time.
        let axis = (0..3).min_by(|&a, &b| t_max[a].partial_cmp(&t_max[b]).unwrap()).unwrap();
        t_enter = t_max[axis];
        v[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        if v[axis] < 0 || v[axis] >= ext[axis] as i64 {
            return None;
        }
    }
    None
}

/// Renders per-view feature maps and ground-truth mask ids.
///
/// Deterministic given `(scene, rig, d, noise_sigma, seed)`; requires
/// `d >= num_classes + 1` so the class embedding and depth channel fit.
pub fn render_views(
    scene: &SceneSample,
    rig: &CameraRig,
    bounds: &WorldBounds,
    d: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(FeatureMaps, GroundTruthMasks)> {
    rig.validate()?;
    bounds.validate()?;
    let l = scene.occupancy.num_classes();
    if d < l + 1 {
        return Err(Error::param(format!(
            "feature dim {d} too small: need num_classes + 1 = {}",
            l + 1
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::param(format!("noise_sigma {noise_sigma} must be finite and >= 0")));
    }

    // Normalization range: no hit can be farther than any camera's distance
    // to the bounds center plus the full diagonal.
    let center = bounds.center();
    let norm_range = rig
        .cameras
        .iter()
        .map(|c| dist(c.position, center))
        .fold(0.0f64, f64::max)
        + bounds.diagonal();

    let stream = StreamRng::new(seed);
    let mut views = Vec::with_capacity(rig.num_views());
    let mut mask_views = Vec::with_capacity(rig.num_views());
    let (mut fh, mut fw) = (0, 0);
    for (vi, cam) in rig.cameras.iter().enumerate() {
        let (h, w) = (cam.image_h, cam.image_w);
        (fh, fw) = (h, w);
        let mut feat = vec![0.0f64; d * h * w];
        let mut mask = vec![0u32; h * w];
        for py in 0..h {
            for px in 0..w {
                let dir = pixel_ray_dir(cam, px, py);
                if let Some((label, owner, t)) = raycast(scene, bounds, cam.position, dir) {
                    feat[label as usize * h * w + py * w + px] = EMBED_SCALE;
                    feat[l * h * w + py * w + px] = (t / norm_range).clamp(0.0, 1.0);
                    mask[py * w + px] = owner as u32;
                } else {
                    feat[py * w + px] = EMBED_SCALE; // background embedding (class 0)
                    feat[l * h * w + py * w + px] = 1.0; // miss depth = far
                }
            }
        }
        if noise_sigma > 0.0 {
            let mut rng = stream.stream("render.noise", vi as u64);
            for f in feat.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *f += noise_sigma * n;
            }
        }
        views.push(Tensor::new(vec![d, h, w], feat)?);
        mask_views.push(mask);
    }
    Ok((
        FeatureMaps { views, feat_h: fh, feat_w: fw, d },
        GroundTruthMasks { views: mask_views, h: fh, w: fw },
    ))
}

/// World-space direction of the ray through pixel center `(px, py)`.
pub fn pixel_ray_dir(cam: &Camera, px: usize, py: usize) -> [f64; 3] {
    let u = px as f64 + 0.5;
    let v = py as f64 + 0.5;
    let dc = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
    let dw = cam.camera_dir_to_world(dc);
    let n = (dw[0] * dw[0] + dw[1] * dw[1] + dw[2] * dw[2]).sqrt();
    [dw[0] / n, dw[1] / n, dw[2] / n]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
