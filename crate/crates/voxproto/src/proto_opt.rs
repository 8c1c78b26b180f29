//! Prototype optimisation: mapping slot affinities onto the 2D grid,
//! prototype-aware pixel features, mask centroids, and the prototype
//! contrastive loss.
//!
//! Shape legend: `N` views, `M` prototypes, `K` hit slots, `d` channels,
//! `D = h'·w'` grid cells (row-major `[h', w']`, flattened).

use crate::clustering::PseudoMaskSet;
use crate::error::{Error, Result};
use crate::numeric::{Tensor, Var};
use crate::scene::HitSet;
use crate::view_transform::AffinityMatrix;

/// Default contrastive temperature.
pub const DEFAULT_TAU_CLS: f64 = 0.3;

/// Per-view mask centroids over prototype-aware pixel features.
pub struct MaskCentroids<'t> {
    /// Per view: `[S, d]`; rows of empty masks are zero and invalid.
    pub centroids: Vec<Var<'t>>,
    /// Per view, per mask: number of covered grid cells (0 ⇒ invalid).
    pub counts: Vec<Vec<usize>>,
}

impl MaskCentroids<'_> {
    /// Indices of the non-empty masks of one view, ascending.
    pub fn valid_ids(&self, view: usize) -> Vec<usize> {
        self.counts[view]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Grid cell of a normalised point under the floor-quantisation rule, or
/// `None` when the point falls outside `[0,1)²`-scaled range.
fn grid_cell(q_c: [f64; 2], grid_hw: (usize, usize)) -> Option<usize> {
    let (gh, gw) = grid_hw;
    let (x, y) = (q_c[0], q_c[1]);
    if !x.is_finite() || !y.is_finite() {
        return None;
    }
    let (px, py) = ((x * gw as f64).floor(), (y * gh as f64).floor());
    if px < 0.0 || py < 0.0 || px >= gw as f64 || py >= gh as f64 {
        return None;
    }
    Some(py as usize * gw + px as usize)
}

/// Scatters per-slot affinities onto the `(h', w')` grid: each valid slot's
/// cell is `(floor(q_c.x·w'), floor(q_c.y·h'))`, out-of-range slots are
/// dropped, and collisions add. `[N, M, K] -> [N, M, D]`.
pub fn map_affinity_to_grid<'t>(
    a: &AffinityMatrix<'t>,
    hits: &HitSet,
    grid_hw: (usize, usize),
) -> Result<Var<'t>> {
    let (gh, gw) = grid_hw;
    if gh == 0 || gw == 0 {
        return Err(Error::param("affinity grid must be nonzero"));
    }
    let shape = a.raw.shape();
    if shape.len() != 3 || shape[0] != hits.views.len() || shape[2] != hits.k {
        return Err(Error::dim(format!(
            "affinity shape {shape:?} does not match {} views x {} slots",
            hits.views.len(),
            hits.k
        )));
    }
    let tape = a.raw.tape();
    // Zero out sentinel values so only valid slots carry mass.
    let masked = a.raw.mul(tape.constant(a.mask.clone()));
    let per_view: Vec<Var<'t>> = (0..shape[0])
        .map(|vi| {
            let bins: Vec<Option<usize>> = hits.views[vi]
                .iter()
                .map(|s| if s.valid { grid_cell(s.q_c, grid_hw) } else { None })
                .collect();
            masked.index_axis0(vi).scatter_add_last(bins, gh * gw)
        })
        .collect();
    Ok(Var::stack0(&per_view))
}

/// Prototype-aware pixel features (`[N, d, D]`):
/// `X[n, :, p] = Σ_m G[n,p]·HA[n,m,p]·P_vox[n,m,:]`.
pub fn prototype_pixel_features<'t>(
    g: Var<'t>,
    ha: Var<'t>,
    p_vox: Var<'t>,
) -> Result<Var<'t>> {
    let (gs, hs, ps) = (g.shape(), ha.shape(), p_vox.shape());
    if gs.len() != 2
        || hs.len() != 3
        || ps.len() != 3
        || hs[0] != gs[0]
        || ps[0] != gs[0]
        || hs[2] != gs[1]
        || ps[1] != hs[1]
    {
        return Err(Error::dim(format!(
            "expected G [N, D], HA [N, M, D], P_vox [N, M, d]; got {gs:?}, {hs:?}, {ps:?}"
        )));
    }
    let per_view: Vec<Var<'t>> = (0..gs[0])
        .map(|vi| {
            let w = ha.index_axis0(vi).scale_cols(g.index_axis0(vi)); // [M, D]
            p_vox.index_axis0(vi).transpose2d().matmul(w) // [d, D]
        })
        .collect();
    Ok(Var::stack0(&per_view))
}

/// Mean of `X` over each mask's cells; empty masks yield zero rows and a
/// zero count.
pub fn mask_centroids<'t>(x: Var<'t>, masks: &PseudoMaskSet) -> Result<MaskCentroids<'t>> {
    let xs = x.shape();
    let d_cells = masks.shape.0 * masks.shape.1;
    if xs.len() != 3 || xs[0] != masks.views.len() || xs[2] != d_cells {
        return Err(Error::dim(format!(
            "features {xs:?} do not match {} mask views of {} cells",
            masks.views.len(),
            d_cells
        )));
    }
    let mut centroids = Vec::with_capacity(xs[0]);
    let mut counts = Vec::with_capacity(xs[0]);
    for vi in 0..xs[0] {
        let s = masks.num_masks[vi];
        let ids: Vec<usize> = masks.views[vi].iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= s) {
            return Err(Error::data(format!(
                "view {vi} mask id {bad} out of range for {s} masks"
            )));
        }
        let mut count = vec![0usize; s];
        for &i in &ids {
            count[i] += 1;
        }
        let pixels = x.index_axis0(vi).transpose2d(); // [D, d]
        centroids.push(pixels.group_mean_rows(ids, s));
        counts.push(count);
    }
    Ok(MaskCentroids { centroids, counts })
}

/// Prototype contrastive loss, summed over views and grid cells.
///
/// Per cell: `LSE_s(cos(M_s, X_cell)/τ) − cos(M_own, X_cell)/τ` over the
/// valid centroids (masks partition the grid, so the in-mask softmax mass
/// is the cell's own centroid). Cells whose own mask is empty are skipped;
/// a view with no valid centroid contributes zero with a logged warning.
pub fn contrastive_loss<'t>(
    x: Var<'t>,
    centroids: &MaskCentroids<'t>,
    masks: &PseudoMaskSet,
    tau_cls: f64,
) -> Result<Var<'t>> {
    if !(tau_cls > 0.0) || !tau_cls.is_finite() {
        return Err(Error::param(format!("tau_cls must be positive, got {tau_cls}")));
    }
    let xs = x.shape();
    let d_cells = masks.shape.0 * masks.shape.1;
    if xs.len() != 3 || xs[0] != masks.views.len() || xs[2] != d_cells {
        return Err(Error::dim(format!(
            "features {xs:?} do not match {} mask views of {} cells",
            masks.views.len(),
            d_cells
        )));
    }
    if centroids.centroids.len() != masks.views.len() {
        return Err(Error::dim("centroid views do not match mask views"));
    }
    let tape = x.tape();
    let mut total: Option<Var<'t>> = None;
    for vi in 0..xs[0] {
        let valid = centroids.valid_ids(vi);
        if valid.is_empty() {
            log::warn!("contrastive loss: view {vi} has no valid mask centroid, skipping");
            continue;
        }
        // Position of each mask id in the valid-centroid list.
        let mut pos = vec![None; centroids.counts[vi].len()];
        for (p, &id) in valid.iter().enumerate() {
            pos[id] = Some(p);
        }
        let (keep, own): (Vec<usize>, Vec<usize>) = masks.views[vi]
            .iter()
            .enumerate()
            .filter_map(|(cell, &id)| pos[id as usize].map(|p| (cell, p)))
            .unzip();
        if keep.is_empty() {
            continue;
        }
        let pixels = x.index_axis0(vi).transpose2d().gather_rows(keep); // [D', d]
        let cents = centroids.centroids[vi].gather_rows(valid); // [S', d]
        let logits = pixels.cosine_matrix(cents).scale(1.0 / tau_cls); // [D', S']
        let view_loss = logits.lse_rows().sub(logits.gather_last(own)).sum_all();
        total = Some(match total {
            Some(acc) => acc.add(view_loss),
            None => view_loss,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::MaskGenerator;
    use crate::numeric::{grad_check_multi, StreamRng, Tape};
    use crate::scene::HitSlot;

    fn hitset_one_view(slots: &[(f64, f64, bool)]) -> HitSet {
        let views = vec![slots
            .iter()
            .map(|&(x, y, valid)| HitSlot { query_index: 0, q_c: [x, y], valid })
            .collect::<Vec<_>>()];
        HitSet { k: slots.len(), views }
    }

    fn affinity<'t>(tape: &'t Tape, raw: Tensor, valid: &[bool]) -> AffinityMatrix<'t> {
        let shape = raw.shape().to_vec();
        let mut mask = vec![0.0; raw.numel()];
        let k = shape[2];
        for (i, m) in mask.iter_mut().enumerate() {
            if valid[i % k] {
                *m = 1.0;
            }
        }
        AffinityMatrix {
            raw: tape.constant(raw),
            mask: Tensor::from_parts(shape, mask),
        }
    }

    fn masks_of(views: Vec<Vec<u32>>, shape: (usize, usize), num: Vec<usize>) -> PseudoMaskSet {
        PseudoMaskSet { views, shape, num_masks: num, generator: MaskGenerator::GroundTruth }
    }

    #[test]
    fn map_scatters_filters_and_adds() {
        let tape = Tape::new();
        let hits = hitset_one_view(&[(0.1, 0.1, true), (0.6, 0.1, true)]);
        let a = affinity(&tape, Tensor::from_parts(vec![1, 1, 2], vec![0.3, 0.7]), &[true, true]);
        let ha = map_affinity_to_grid(&a, &hits, (2, 2)).unwrap().value();
        assert_eq!(ha.shape(), &[1, 1, 4]);
        assert_eq!(ha.data(), &[0.3, 0.7, 0.0, 0.0]);

        // Out-of-range slot contributes nothing.
        let hits2 = hitset_one_view(&[(0.1, 0.1, true), (1.5, 0.2, true)]);
        let ha2 = map_affinity_to_grid(&a, &hits2, (2, 2)).unwrap().value();
        assert_eq!(ha2.data(), &[0.3, 0.0, 0.0, 0.0]);

        // Colliding slots add; invalid sentinel slots never leak.
        let hits3 = hitset_one_view(&[(0.2, 0.2, true), (0.3, 0.1, true), (0.1, 0.1, false)]);
        let a3 = affinity(
            &tape,
            Tensor::from_parts(vec![1, 1, 3], vec![0.25, 0.5, crate::view_transform::INVALID_AFFINITY]),
            &[true, true, false],
        );
        let ha3 = map_affinity_to_grid(&a3, &hits3, (2, 2)).unwrap().value();
        assert_eq!(ha3.data(), &[0.75, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn map_conserves_in_bounds_mass() {
        let rng = StreamRng::new(4);
        let (n, m, k) = (2, 3, 7);
        let raw = rng.normal_tensor("a", 0, &[n, m, k], 1.0);
        let coords: Vec<(f64, f64, bool)> = (0..k)
            .map(|i| {
                let x = -0.3 + 0.25 * i as f64; // some slots out of range
                (x, 0.1 + 0.1 * i as f64, i != 3)
            })
            .collect();
        let hits = {
            let view: Vec<HitSlot> = coords
                .iter()
                .map(|&(x, y, valid)| HitSlot { query_index: 0, q_c: [x, y], valid })
                .collect();
            HitSet { k, views: vec![view.clone(), view] }
        };
        let tape = Tape::new();
        let valid: Vec<bool> = coords.iter().map(|c| c.2).collect();
        let a = affinity(&tape, raw.clone(), &valid);
        let ha = map_affinity_to_grid(&a, &hits, (3, 4)).unwrap().value();
        for vi in 0..n {
            for mi in 0..m {
                let got: f64 = (0..12).map(|c| ha.at(&[vi, mi, c])).sum();
                let want: f64 = (0..k)
                    .filter(|&ki| valid[ki] && grid_cell([coords[ki].0, coords[ki].1], (3, 4)).is_some())
                    .map(|ki| raw.at(&[vi, mi, ki]))
                    .sum();
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pixel_features_hand_value_zero_salience_and_linearity() {
        let tape = Tape::new();
        // M=1, d=1: G=[0.5, 1.0], HA=[[0.2, 0.4]], P_vox=[3] -> X=[0.3, 1.2].
        let g = tape.constant(Tensor::from_parts(vec![1, 2], vec![0.5, 1.0]));
        let ha = tape.constant(Tensor::from_parts(vec![1, 1, 2], vec![0.2, 0.4]));
        let pv = tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![3.0]));
        let x = prototype_pixel_features(g, ha, pv).unwrap().value();
        assert_eq!(x.shape(), &[1, 1, 2]);
        assert!((x.data()[0] - 0.3).abs() < 1e-12 && (x.data()[1] - 1.2).abs() < 1e-12);

        let g0 = tape.constant(Tensor::zeros(&[1, 2]));
        let x0 = prototype_pixel_features(g0, ha, pv).unwrap().value();
        assert_eq!(x0.data(), &[0.0, 0.0]);

        // Linearity in m: an M=2 instance is the sum of its M=1 slices.
        let rng = StreamRng::new(8);
        let gt = rng.normal_tensor("g", 0, &[1, 3], 1.0).map(f64::abs);
        let hat = rng.normal_tensor("ha", 0, &[1, 2, 3], 1.0);
        let pvt = rng.normal_tensor("pv", 0, &[1, 2, 2], 1.0);
        let tape2 = Tape::new();
        let full = prototype_pixel_features(
            tape2.constant(gt.clone()),
            tape2.constant(hat.clone()),
            tape2.constant(pvt.clone()),
        )
        .unwrap()
        .value();
        let mut sum = Tensor::zeros(&[1, 2, 3]).data().to_vec();
        for mi in 0..2 {
            let ha_m: Vec<f64> = (0..3).map(|c| hat.at(&[0, mi, c])).collect();
            let pv_m: Vec<f64> = (0..2).map(|c| pvt.at(&[0, mi, c])).collect();
            let part = prototype_pixel_features(
                tape2.constant(gt.clone()),
                tape2.constant(Tensor::from_parts(vec![1, 1, 3], ha_m)),
                tape2.constant(Tensor::from_parts(vec![1, 1, 2], pv_m)),
            )
            .unwrap()
            .value();
            for (s, v) in sum.iter_mut().zip(part.data()) {
                *s += v;
            }
        }
        assert!(full.max_abs_diff(&Tensor::from_parts(vec![1, 2, 3], sum)) < 1e-12);
    }

    #[test]
    fn pixel_features_gradcheck() {
        let rng = StreamRng::new(21);
        let g = rng.normal_tensor("g", 0, &[2, 4], 0.8);
        let ha = rng.normal_tensor("ha", 0, &[2, 3, 4], 0.8);
        let pv = rng.normal_tensor("pv", 0, &[2, 3, 2], 0.8);
        let rep = grad_check_multi(
            |_, xs| prototype_pixel_features(xs[0], xs[1], xs[2]).unwrap().sum_all(),
            &[g, ha, pv],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn centroids_means_and_empty_masks() {
        let tape = Tape::new();
        // d=1, 4 cells: values 1, 3, 5, 7.
        let x = tape.constant(Tensor::from_parts(vec![1, 1, 4], vec![1.0, 3.0, 5.0, 7.0]));
        // One mask covering everything.
        let all = masks_of(vec![vec![0, 0, 0, 0]], (2, 2), vec![1]);
        let c = mask_centroids(x, &all).unwrap();
        assert_eq!(c.counts[0], vec![4]);
        assert!((c.centroids[0].value().item() - 4.0).abs() < 1e-12);

        // Mask {1,3} vs {5,7}; means 2 and 6.
        let two = masks_of(vec![vec![0, 0, 1, 1]], (2, 2), vec![2]);
        let c = mask_centroids(x, &two).unwrap();
        assert_eq!(c.centroids[0].value().data(), &[2.0, 6.0]);

        // Singleton partition: centroids are the pixels themselves.
        let singles = masks_of(vec![vec![0, 1, 2, 3]], (2, 2), vec![4]);
        let c = mask_centroids(x, &singles).unwrap();
        assert_eq!(c.centroids[0].value().data(), &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(c.valid_ids(0), vec![0, 1, 2, 3]);

        // Declared-but-unused mask id: zero row, flagged invalid.
        let gappy = masks_of(vec![vec![0, 0, 2, 2]], (2, 2), vec![3]);
        let c = mask_centroids(x, &gappy).unwrap();
        assert_eq!(c.counts[0], vec![2, 0, 2]);
        assert_eq!(c.valid_ids(0), vec![0, 2]);
        assert_eq!(c.centroids[0].value().at(&[1, 0]), 0.0);
    }

    #[test]
    fn contrastive_closed_forms() {
        let tape = Tape::new();
        // S=1: numerator equals denominator -> exactly zero.
        let x = tape.constant(Tensor::from_parts(vec![1, 2, 2], vec![1.0, 0.5, -0.2, 0.3]));
        let all = masks_of(vec![vec![0, 0]], (1, 2), vec![1]);
        let c = mask_centroids(x, &all).unwrap();
        let loss = contrastive_loss(x, &c, &all, 0.3).unwrap().value();
        assert_eq!(loss.item(), 0.0);

        // S=2, tau=0.3, pixel collinear with its own centroid and orthogonal
        // to the other: log(1 + e^{-1/0.3}).
        let x1 = tape.constant(Tensor::from_parts(vec![1, 2, 1], vec![2.0, 0.0]));
        let own_masks = masks_of(vec![vec![0]], (1, 1), vec![2]);
        let cents = MaskCentroids {
            centroids: vec![tape.constant(Tensor::from_parts(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]))],
            counts: vec![vec![1, 1]],
        };
        let loss = contrastive_loss(x1, &cents, &own_masks, 0.3).unwrap().value();
        let want = (1.0 + (-1.0f64 / 0.3).exp()).ln();
        assert!((loss.item() - want).abs() < 1e-9, "{} vs {want}", loss.item());
        assert!((want - 0.0351).abs() < 1e-4);

        // Pixel orthogonal to both centroids: log 2 for any tau.
        let x2 = tape.constant(Tensor::from_parts(vec![1, 3, 1], vec![0.0, 0.0, 1.0]));
        let cents3 = MaskCentroids {
            centroids: vec![tape.constant(Tensor::from_parts(
                vec![2, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            ))],
            counts: vec![vec![1, 1]],
        };
        for tau in [0.1, 0.3, 1.7] {
            let loss = contrastive_loss(x2, &cents3, &own_masks, tau).unwrap().value();
            assert!((loss.item() - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_monotone_in_tau_nonnegative_and_empty_guard() {
        let tape = Tape::new();
        // Pixel strictly closest to its own centroid: lowering tau lowers loss.
        let x = tape.constant(Tensor::from_parts(vec![1, 2, 1], vec![1.0, 0.0]));
        let masks = masks_of(vec![vec![0]], (1, 1), vec![2]);
        let cents = MaskCentroids {
            centroids: vec![tape.constant(Tensor::from_parts(
                vec![2, 2],
                vec![0.9, 0.1, 0.5, 0.6],
            ))],
            counts: vec![vec![1, 1]],
        };
        let mut prev = f64::INFINITY;
        for tau in [0.5, 0.3, 0.2, 0.1] {
            let loss = contrastive_loss(x, &cents, &masks, tau).unwrap().value().item();
            assert!(loss > 0.0 && loss < prev, "tau={tau}: {loss} !< {prev}");
            prev = loss;
        }

        // Random instance stays nonnegative.
        let rng = StreamRng::new(40);
        let xr = rng.normal_tensor("x", 0, &[2, 3, 6], 1.0);
        let m2 = masks_of(
            vec![vec![0, 0, 1, 1, 2, 2], vec![2, 1, 0, 0, 1, 2]],
            (2, 3),
            vec![3, 3],
        );
        let tape2 = Tape::new();
        let xv = tape2.constant(xr);
        let c2 = mask_centroids(xv, &m2).unwrap();
        let loss = contrastive_loss(xv, &c2, &m2, 0.3).unwrap().value().item();
        assert!(loss >= 0.0);

        // Every centroid invalid: zero loss (and a logged warning).
        let cents_empty = MaskCentroids {
            centroids: vec![tape.constant(Tensor::zeros(&[2, 2]))],
            counts: vec![vec![0, 0]],
        };
        let loss = contrastive_loss(x, &cents_empty, &masks, 0.3).unwrap().value();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn contrastive_full_pipeline_gradcheck() {
        let rng = StreamRng::new(31);
        let x = rng.normal_tensor("x", 0, &[2, 3, 6], 0.9);
        let masks = masks_of(
            vec![vec![0, 1, 1, 0, 2, 2], vec![1, 1, 0, 2, 2, 0]],
            (2, 3),
            vec![3, 3],
        );
        let rep = grad_check_multi(
            |_, xs| {
                let c = mask_centroids(xs[0], &masks).unwrap();
                contrastive_loss(xs[0], &c, &masks, 0.3).unwrap()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
