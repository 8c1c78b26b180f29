//! Iterative 2D prototype grouping over per-view feature maps and
//! pseudo-mask generation (grid k-means superpixels or ground-truth
//! downsampling).
//!
//! Prototypes summarise a feature map on a coarse regular grid: each grid
//! cell starts as the mean feature of its pixels and is refined by a few
//! rounds of soft assignment restricted to the 3×3 neighbourhood of each
//! pixel's home cell.  Everything here operates on plain tensors — the
//! outputs are cached per scene and treated as constants by training.

use crate::error::{Error, Result};
use crate::numeric::{StreamRng, Tensor};
use crate::scene::GroundTruthMasks;

// ── Defaults ──

/// Default prototype-grid downsampling ratio.
pub const DEFAULT_DOWNSAMPLE: usize = 4;
/// Default number of grouping iterations.
pub const DEFAULT_PROTO_ITERS: usize = 6;
/// Default soft-assignment temperature.
pub const DEFAULT_ASSIGN_TAU: f64 = 0.07;
/// k-means refinement iterations for the grid k-means mask generator.
pub const KMEANS_ITERS: usize = 10;

// ── Prototype sets ──

/// Per-view 2D prototype features on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet2D {
    /// Prototype features, shape `[n_views, m, d]` with `m = m_h * m_w`.
    pub features: Tensor,
    /// Prototype grid extents `(m_h, m_w)`; cell `(u, v)` is prototype `u * m_w + v`.
    pub grid_shape: (usize, usize),
    /// Downsampling ratio between the feature map and the prototype grid.
    pub r: usize,
}

impl PrototypeSet2D {
    pub fn num_views(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn num_prototypes(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }
}

fn check_fmap(fmap: &Tensor) -> Result<(usize, usize, usize)> {
    let s = fmap.shape();
    if s.len() != 3 || s.iter().any(|&e| e == 0) {
        return Err(Error::dim(format!(
            "feature map must be [d, h, w] with nonzero extents, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Mean feature of each `r × r` grid cell of one `[d, h, w]` feature map
/// (edge cells are smaller when `r` does not divide `h` or `w`).
///
/// Returns a single-view set with features `[1, m, d]`.
pub fn init_prototypes(fmap: &Tensor, r: usize) -> Result<PrototypeSet2D> {
    init_prototypes_views(std::slice::from_ref(fmap), r)
}

/// [`init_prototypes`] over several same-shaped views, stacked to `[n, m, d]`.
pub fn init_prototypes_views(views: &[Tensor], r: usize) -> Result<PrototypeSet2D> {
    if r == 0 {
        return Err(Error::param("downsample ratio r must be >= 1"));
    }
    if views.is_empty() {
        return Err(Error::dim("need at least one view"));
    }
    let (d, h, w) = check_fmap(&views[0])?;
    let (m_h, m_w) = (h.div_ceil(r), w.div_ceil(r));
    let m = m_h * m_w;
    let mut out = vec![0.0; views.len() * m * d];
    for (n, fmap) in views.iter().enumerate() {
        if fmap.shape() != views[0].shape() {
            return Err(Error::dim(format!(
                "view {n} shape {:?} differs from view 0 shape {:?}",
                fmap.shape(),
                views[0].shape()
            )));
        }
        let fd = fmap.data();
        for u in 0..m_h {
            for v in 0..m_w {
                let (y0, y1) = (u * r, ((u + 1) * r).min(h));
                let (x0, x1) = (v * r, ((v + 1) * r).min(w));
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let base = (n * m + u * m_w + v) * d;
                for c in 0..d {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += fd[c * h * w + y * w + x];
                        }
                    }
                    out[base + c] = acc / count;
                }
            }
        }
    }
    Ok(PrototypeSet2D {
        features: Tensor::from_parts(vec![views.len(), m, d], out),
        grid_shape: (m_h, m_w),
        r,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Refine prototypes by `iters` rounds of soft assignment.
///
/// Each round: every pixel distributes a softmax over
/// `cos(pixel, prototype) / assign_tau` across the 3×3 prototype cells
/// around its home cell, and each prototype becomes the assignment-weighted
/// mean of its pixels (prototypes receiving negligible total weight keep
/// their previous value).
pub fn iterate_prototypes(
    views: &[Tensor],
    protos: &PrototypeSet2D,
    iters: usize,
    assign_tau: f64,
) -> Result<PrototypeSet2D> {
    if !(assign_tau > 0.0) || !assign_tau.is_finite() {
        return Err(Error::param(format!(
            "assign_tau must be positive and finite, got {assign_tau}"
        )));
    }
    if views.len() != protos.num_views() {
        return Err(Error::dim(format!(
            "{} views supplied for a {}-view prototype set",
            views.len(),
            protos.num_views()
        )));
    }
    let (d, h, w) = check_fmap(&views[0])?;
    let (m_h, m_w) = protos.grid_shape;
    let (m, r) = (protos.num_prototypes(), protos.r);
    if d != protos.dim() || m_h != h.div_ceil(r) || m_w != w.div_ceil(r) {
        return Err(Error::dim(format!(
            "prototype grid {m_h}x{m_w} (d={}) does not match [d={d}, h={h}, w={w}] at r={r}",
            protos.dim()
        )));
    }
    let mut feats = protos.features.data().to_vec();
    for _ in 0..iters {
        for (n, fmap) in views.iter().enumerate() {
            if fmap.shape() != views[0].shape() {
                return Err(Error::dim(format!(
                    "view {n} shape {:?} differs from view 0 shape {:?}",
                    fmap.shape(),
                    views[0].shape()
                )));
            }
            let fd = fmap.data();
            let cur = &feats[n * m * d..(n + 1) * m * d];
            let mut num = vec![0.0; m * d];
            let mut den = vec![0.0; m];
            let mut pixel = vec![0.0; d];
            // (cell index, raw cosine) pairs for one pixel's neighbourhood.
            let mut neigh: Vec<(usize, f64)> = Vec::with_capacity(9);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..d {
                        pixel[c] = fd[c * h * w + y * w + x];
                    }
                    let (u0, v0) = (y / r, x / r);
                    neigh.clear();
                    for du in -1i64..=1 {
                        for dv in -1i64..=1 {
                            let (u, v) = (u0 as i64 + du, v0 as i64 + dv);
                            if u < 0 || v < 0 || u >= m_h as i64 || v >= m_w as i64 {
                                continue;
                            }
                            let cell = u as usize * m_w + v as usize;
                            let sim = cosine(&pixel, &cur[cell * d..(cell + 1) * d]);
                            neigh.push((cell, sim / assign_tau));
                        }
                    }
                    let hi = neigh.iter().fold(f64::NEG_INFINITY, |a, &(_, s)| a.max(s));
                    let mut z = 0.0;
                    for p in neigh.iter_mut() {
                        p.1 = (p.1 - hi).exp();
                        z += p.1;
                    }
                    for &(cell, e) in &neigh {
                        let wgt = e / z;
                        den[cell] += wgt;
                        for c in 0..d {
                            num[cell * d + c] += wgt * pixel[c];
                        }
                    }
                }
            }
            let next = &mut feats[n * m * d..(n + 1) * m * d];
            for cell in 0..m {
                if den[cell] > 1e-12 {
                    for c in 0..d {
                        next[cell * d + c] = num[cell * d + c] / den[cell];
                    }
                }
            }
        }
    }
    Ok(PrototypeSet2D {
        features: Tensor::from_parts(vec![views.len(), m, d], feats),
        grid_shape: protos.grid_shape,
        r,
    })
}

// ── Pseudo masks ──

/// How to obtain the pseudo ground-truth segmentation masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGenerator {
    /// k-means over pixel features, centers seeded on a regular grid.
    GridKmeans,
    /// Nearest-neighbour downsampling of the scene's instance masks.
    GroundTruth,
}

/// Per-view mask id maps at a common `(h', w')` resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMaskSet {
    /// Per view: dense mask ids (`0..num_masks[view]`), row-major `h' * w'`.
    pub views: Vec<Vec<u32>>,
    /// Mask map extents `(h', w')`.
    pub shape: (usize, usize),
    /// Number of masks per view; every id below this occurs at least once.
    pub num_masks: Vec<usize>,
    pub generator: MaskGenerator,
}

/// Input for [`generate_pseudo_masks`], matched against the generator tag.
pub enum PseudoMaskInput<'a> {
    /// Per-view `[d, h_f, w_f]` feature maps (grid k-means).
    Features(&'a [Tensor]),
    /// Rendered instance masks (ground-truth downsampling).
    GroundTruth(&'a GroundTruthMasks),
}

/// Nearest source index for target pixel `t` when resizing `src` → `dst`.
fn nn_index(t: usize, dst: usize, src: usize) -> usize {
    (((t as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

/// Remap arbitrary ids to dense `0..s` preserving numeric order, so maps
/// whose id set is already `{0, .., s-1}` pass through unchanged.
fn compact_ids(map: &mut [u32]) -> usize {
    let mut seen: Vec<u32> = map.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for id in map.iter_mut() {
        *id = seen.binary_search(id).unwrap() as u32;
    }
    seen.len()
}

/// Generate the per-view pseudo ground-truth masks at `(h', w')`.
///
/// `grid_kmeans` clusters pixel features (cosine distance, [`KMEANS_ITERS`]
/// refinements, centers seeded on a regular grid, empty clusters reseeded
/// from `seed`) and downsamples the resulting id map; `ground_truth`
/// downsamples the rendered instance masks directly.  Ids are compacted to
/// `0..S` per view.
pub fn generate_pseudo_masks(
    input: &PseudoMaskInput,
    target: (usize, usize),
    s_target: usize,
    generator: MaskGenerator,
    seed: u64,
) -> Result<PseudoMaskSet> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::param("target mask shape must be nonzero"));
    }
    if s_target == 0 || s_target > th * tw {
        return Err(Error::param(format!(
            "S_target must lie in 1..={} for a {th}x{tw} mask grid, got {s_target}",
            th * tw
        )));
    }
    let mut views = Vec::new();
    match (generator, input) {
        (MaskGenerator::GroundTruth, PseudoMaskInput::GroundTruth(masks)) => {
            for src in &masks.views {
                let mut map = vec![0u32; th * tw];
                for ty in 0..th {
                    let sy = nn_index(ty, th, masks.h);
                    for tx in 0..tw {
                        map[ty * tw + tx] = src[sy * masks.w + nn_index(tx, tw, masks.w)];
                    }
                }
                views.push(map);
            }
        }
        (MaskGenerator::GridKmeans, PseudoMaskInput::Features(fmaps)) => {
            let rng = StreamRng::new(seed);
            for (n, fmap) in fmaps.iter().enumerate() {
                let full = kmeans_id_map(fmap, s_target, &rng, n as u64)?;
                let (_, h, w) = check_fmap(fmap)?;
                let mut map = vec![0u32; th * tw];
                for ty in 0..th {
                    let sy = nn_index(ty, th, h);
                    for tx in 0..tw {
                        map[ty * tw + tx] = full[sy * w + nn_index(tx, tw, w)];
                    }
                }
                views.push(map);
            }
        }
        _ => {
            return Err(Error::param(
                "pseudo-mask input kind does not match the generator tag",
            ));
        }
    }
    let mut num_masks = Vec::with_capacity(views.len());
    for map in views.iter_mut() {
        num_masks.push(compact_ids(map));
    }
    Ok(PseudoMaskSet {
        views,
        shape: target,
        num_masks,
        generator,
    })
}

/// Cosine k-means over the pixels of one `[d, h, w]` map; returns the
/// per-pixel cluster id map at the map's own resolution.
fn kmeans_id_map(fmap: &Tensor, k: usize, rng: &StreamRng, view: u64) -> Result<Vec<u32>> {
    use rand::Rng;
    let (d, h, w) = check_fmap(fmap)?;
    if k > h * w {
        return Err(Error::param(format!(
            "S_target {k} exceeds the {h}x{w} feature grid"
        )));
    }
    let fd = fmap.data();
    let pixel = |y: usize, x: usize| -> Vec<f64> {
        (0..d).map(|c| fd[c * h * w + y * w + x]).collect()
    };
    // Seed centers on a regular grid with roughly the image's aspect ratio.
    let g_w = ((k as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let g_h = k.div_ceil(g_w).clamp(1, h);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    'seed: for gy in 0..g_h {
        for gx in 0..g_w {
            if centers.len() == k {
                break 'seed;
            }
            centers.push(pixel(nn_index(gy, g_h, h), nn_index(gx, g_w, w)));
        }
    }
    while centers.len() < k {
        let i = centers.len();
        centers.push(pixel(i / w % h, i % w));
    }
    let mut assign = vec![0u32; h * w];
    let mut stream = rng.stream("clustering.kmeans", view);
    for _ in 0..KMEANS_ITERS {
        for y in 0..h {
            for x in 0..w {
                let p = pixel(y, x);
                let (mut best, mut best_sim) = (0, f64::NEG_INFINITY);
                for (ci, center) in centers.iter().enumerate() {
                    let sim = cosine(&p, center);
                    if sim > best_sim {
                        best_sim = sim;
                        best = ci;
                    }
                }
                assign[y * w + x] = best as u32;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for y in 0..h {
            for x in 0..w {
                let ci = assign[y * w + x] as usize;
                counts[ci] += 1;
                for (s, v) in sums[ci].iter_mut().zip(pixel(y, x)) {
                    *s += v;
                }
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                for (cv, s) in centers[ci].iter_mut().zip(&sums[ci]) {
                    *cv = s / counts[ci] as f64;
                }
            } else {
                // Reseed an empty cluster from a random pixel.
                let y = stream.gen_range(0..h);
                let x = stream.gen_range(0..w);
                centers[ci] = pixel(y, x);
            }
        }
    }
    Ok(assign)
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(h: usize, w: usize, d: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut data = vec![0.0; d * h * w];
        for c in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data[c * h * w + y * w + x] = f(c, y, x);
                }
            }
        }
        Tensor::from_parts(vec![d, h, w], data)
    }

    #[test]
    fn init_constant_map_gives_constant_prototypes() {
        let fmap = map_from(7, 5, 3, |c, _, _| 2.5 + c as f64);
        let protos = init_prototypes(&fmap, 3).unwrap();
        assert_eq!(protos.grid_shape, (3, 2));
        for cell in 0..protos.num_prototypes() {
            for c in 0..3 {
                assert_eq!(protos.features.at(&[0, cell, c]), 2.5 + c as f64);
            }
        }
    }

    #[test]
    fn init_r1_is_identity_and_blocks_average() {
        let fmap = map_from(4, 4, 1, |_, y, x| (y * 4 + x) as f64 + 1.0);
        let id = init_prototypes(&fmap, 1).unwrap();
        assert_eq!(id.num_prototypes(), 16);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(id.features.at(&[0, y * 4 + x, 0]), fmap.at(&[0, y, x]));
            }
        }
        let protos = init_prototypes(&fmap, 2).unwrap();
        let got: Vec<f64> = (0..4).map(|i| protos.features.at(&[0, i, 0])).collect();
        assert_eq!(got, vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn init_weighted_prototype_sum_matches_pixel_sum() {
        // 5x7 at r=3 exercises smaller edge cells.
        let fmap = map_from(5, 7, 2, |c, y, x| (c + 1) as f64 * (y as f64 - 0.3 * x as f64));
        let protos = init_prototypes(&fmap, 3).unwrap();
        let (m_h, m_w) = protos.grid_shape;
        for c in 0..2 {
            let mut weighted = 0.0;
            for u in 0..m_h {
                for v in 0..m_w {
                    let count = ((u * 3 + 3).min(5) - u * 3) * ((v * 3 + 3).min(7) - v * 3);
                    weighted += count as f64 * protos.features.at(&[0, u * m_w + v, c]);
                }
            }
            let direct: f64 = (0..5)
                .flat_map(|y| (0..7).map(move |x| (y, x)))
                .map(|(y, x)| fmap.at(&[c, y, x]))
                .sum();
            assert!((weighted - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn iterate_zero_iters_is_identity_and_constant_map_is_fixed_point() {
        let fmap = map_from(8, 8, 2, |c, y, x| (c + y + x) as f64 * 0.1 - 0.4);
        let protos = init_prototypes(&fmap, 4).unwrap();
        let same = iterate_prototypes(
            std::slice::from_ref(&fmap),
            &protos,
            0,
            DEFAULT_ASSIGN_TAU,
        )
        .unwrap();
        assert_eq!(same.features, protos.features);

        let flat = map_from(8, 8, 2, |c, _, _| if c == 0 { 1.0 } else { -2.0 });
        let p0 = init_prototypes(&flat, 4).unwrap();
        let p6 = iterate_prototypes(std::slice::from_ref(&flat), &p0, 6, DEFAULT_ASSIGN_TAU)
            .unwrap();
        assert!(p6.features.max_abs_diff(&p0.features) < 1e-12);
    }

    #[test]
    fn iterate_antipodal_regions_converge_and_stay_fixed() {
        // Left half (+1, +0.5), right half antipodal; regions aligned with
        // the r=4 prototype grid so each is piecewise-constant per cell.
        let fmap = map_from(8, 16, 2, |c, _, x| {
            let v = if c == 0 { 1.0 } else { 0.5 };
            if x < 8 {
                v
            } else {
                -v
            }
        });
        let p0 = init_prototypes(&fmap, 4).unwrap();
        let p6 = iterate_prototypes(std::slice::from_ref(&fmap), &p0, 6, DEFAULT_ASSIGN_TAU)
            .unwrap();
        let (m_h, m_w) = p6.grid_shape;
        for u in 0..m_h {
            for v in 0..m_w {
                let sign = if v < m_w / 2 { 1.0 } else { -1.0 };
                assert!((p6.features.at(&[0, u * m_w + v, 0]) - sign * 1.0).abs() < 1e-6);
                assert!((p6.features.at(&[0, u * m_w + v, 1]) - sign * 0.5).abs() < 1e-6);
            }
        }
        // Cross-region softmax leakage is exp(-2/tau) — far below 1e-9 —
        // so the converged prototypes are a numerical fixed point.
        let p7 = iterate_prototypes(std::slice::from_ref(&fmap), &p6, 1, DEFAULT_ASSIGN_TAU)
            .unwrap();
        assert!(p7.features.max_abs_diff(&p6.features) < 1e-9);
    }

    #[test]
    fn iterate_is_per_view_independent() {
        let a = map_from(8, 8, 2, |c, y, x| (c as f64 + 1.0) * (y as f64 - x as f64));
        let b = map_from(8, 8, 2, |c, y, x| (x as f64 * 0.3 - y as f64) - c as f64);
        let ab = init_prototypes_views(&[a.clone(), b.clone()], 4).unwrap();
        let ba = init_prototypes_views(&[b.clone(), a.clone()], 4).unwrap();
        let ab6 = iterate_prototypes(&[a.clone(), b.clone()], &ab, 3, 0.07).unwrap();
        let ba6 = iterate_prototypes(&[b, a], &ba, 3, 0.07).unwrap();
        let m = ab6.num_prototypes();
        for cell in 0..m {
            for c in 0..2 {
                assert_eq!(ab6.features.at(&[0, cell, c]), ba6.features.at(&[1, cell, c]));
                assert_eq!(ab6.features.at(&[1, cell, c]), ba6.features.at(&[0, cell, c]));
            }
        }
    }

    #[test]
    fn ground_truth_masks_downsample_and_pass_through() {
        let masks = GroundTruthMasks {
            views: vec![vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2, 1, 1]],
            h: 4,
            w: 4,
        };
        let half = generate_pseudo_masks(
            &PseudoMaskInput::GroundTruth(&masks),
            (2, 2),
            1,
            MaskGenerator::GroundTruth,
            0,
        )
        .unwrap();
        assert_eq!(half.views[0], vec![0, 1, 2, 1]);
        assert_eq!(half.num_masks, vec![3]);

        let same = generate_pseudo_masks(
            &PseudoMaskInput::GroundTruth(&masks),
            (4, 4),
            1,
            MaskGenerator::GroundTruth,
            0,
        )
        .unwrap();
        assert_eq!(same.views[0], masks.views[0]);

        // Empty scene: a single background mask.
        let empty = GroundTruthMasks {
            views: vec![vec![0; 16]],
            h: 4,
            w: 4,
        };
        let set = generate_pseudo_masks(
            &PseudoMaskInput::GroundTruth(&empty),
            (4, 4),
            1,
            MaskGenerator::GroundTruth,
            0,
        )
        .unwrap();
        assert_eq!(set.num_masks, vec![1]);
        assert!(set.views[0].iter().all(|&id| id == 0));
    }

    #[test]
    fn grid_kmeans_recovers_quadrants() {
        // Four constant quadrants with well-separated directions.
        let dirs = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let fmap = map_from(8, 8, 2, |c, y, x| {
            let q = (y / 4) * 2 + x / 4;
            dirs[q][c]
        });
        let set = generate_pseudo_masks(
            &PseudoMaskInput::Features(std::slice::from_ref(&fmap)),
            (8, 8),
            4,
            MaskGenerator::GridKmeans,
            7,
        )
        .unwrap();
        assert_eq!(set.num_masks, vec![4]);
        let ids = &set.views[0];
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(ids[y * 8 + x], ids[(y / 4 * 4) * 8 + x / 4 * 4]);
            }
        }
        let mut uniq: Vec<u32> = ids.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq, vec![0, 1, 2, 3]);
    }

    #[test]
    fn masks_partition_grid_and_validate_inputs() {
        let fmap = map_from(6, 6, 3, |c, y, x| ((c * 31 + y * 7 + x * 13) % 11) as f64 - 5.0);
        let set = generate_pseudo_masks(
            &PseudoMaskInput::Features(std::slice::from_ref(&fmap)),
            (3, 3),
            4,
            MaskGenerator::GridKmeans,
            11,
        )
        .unwrap();
        let s = set.num_masks[0];
        assert!((1..=9).contains(&s));
        let mut hit = vec![false; s];
        for &id in &set.views[0] {
            hit[id as usize] = true;
        }
        assert!(hit.iter().all(|&b| b), "every id below S occurs");

        let err = generate_pseudo_masks(
            &PseudoMaskInput::Features(std::slice::from_ref(&fmap)),
            (2, 2),
            5,
            MaskGenerator::GridKmeans,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
        let err = generate_pseudo_masks(
            &PseudoMaskInput::Features(std::slice::from_ref(&fmap)),
            (2, 2),
            2,
            MaskGenerator::GroundTruth,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }
}
