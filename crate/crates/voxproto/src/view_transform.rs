//! Prototype-aware view transformation.
//!
//! Lifts per-view 2D prototypes into voxel space and back: cosine affinity
//! between projected prototypes and the hit voxel queries, the
//! aggregate/dispatch exchange (a guarded weighted mean into prototype space
//! followed by a residual message back to the queries), and single-scale
//! deformable cross-attention from the queries into the per-view feature
//! maps, which also produces the attention salience map `G` used by the
//! prototype-level objective.
//!
//! Shape legend: `N` views, `M` prototypes, `K` hit slots per view,
//! `d` channels, `cells = h·w·z` query cells, `D = h'·w'` attention-map
//! cells. Query grids are stored cells-major (`[cells, d]`, canonical
//! x-fastest cell order).

use crate::clustering::{init_prototypes_views, iterate_prototypes, PrototypeSet2D};
use crate::error::{Error, Result};
use crate::numeric::{Activation, BoundMlp, MlpParams, StreamRng, Tensor, Var};
use crate::scene::{FeatureMaps, HitSet};

/// Raw affinity assigned to invalid hit slots; sigmoid maps it below 1e-12,
/// and a hard mask then zeroes it exactly.
pub const INVALID_AFFINITY: f64 = -30.0;

// ── Parameters ──

/// Parameters of one deformable cross-attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// Per-query sampling offsets, `d -> 2·n_points` (zero-initialised).
    pub offset: MlpParams,
    /// Per-query point logits, `d -> n_points`.
    pub weight: MlpParams,
    /// Output projection of the aggregated sample, `d_f -> d`.
    pub out_proj: MlpParams,
    pub n_points: usize,
}

impl AttentionParams {
    pub fn init(d: usize, n_points: usize, rng: &StreamRng, label: &str) -> Self {
        AttentionParams {
            offset: MlpParams::init(
                &[d, 2 * n_points],
                &[Activation::Identity],
                rng,
                &format!("{label}.offset"),
            )
            .zero_last_layer(),
            weight: MlpParams::init(
                &[d, n_points],
                &[Activation::Identity],
                rng,
                &format!("{label}.weight"),
            ),
            out_proj: MlpParams::init(
                &[d, d],
                &[Activation::Identity],
                rng,
                &format!("{label}.out_proj"),
            ),
            n_points: n_points,
        }
    }
}

/// Parameters of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Prototype projection ahead of the affinity, `d -> d -> d`.
    pub proj: MlpParams,
    /// Dispatch message MLP, `d -> d -> d` (zero-initialised output).
    pub dispatch: MlpParams,
    pub attention: AttentionParams,
}

impl LayerParams {
    pub fn init(d: usize, n_points: usize, rng: &StreamRng, label: &str) -> Self {
        let acts = [Activation::Relu, Activation::Identity];
        LayerParams {
            proj: MlpParams::init(&[d, d, d], &acts, rng, &format!("{label}.proj")),
            dispatch: MlpParams::init(&[d, d, d], &acts, rng, &format!("{label}.dispatch"))
                .zero_last_layer(),
            attention: AttentionParams::init(d, n_points, rng, &format!("{label}.attn")),
        }
    }
}

/// Full encoder parameter set.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub layers: Vec<LayerParams>,
    pub d: usize,
    pub n_points: usize,
}

impl EncoderParams {
    pub fn init(d: usize, n_points: usize, num_layers: usize, rng: &StreamRng) -> Self {
        let layers = (0..num_layers)
            .map(|i| LayerParams::init(d, n_points, rng, &format!("encoder.{i}")))
            .collect();
        EncoderParams { layers, d, n_points }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_points == 0 {
            return Err(Error::param("encoder needs d >= 1 and n_points >= 1"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (mlp, name, in_d, out_d) in [
                (&l.proj, "proj", self.d, self.d),
                (&l.dispatch, "dispatch", self.d, self.d),
                (&l.attention.offset, "attn.offset", self.d, 2 * self.n_points),
                (&l.attention.weight, "attn.weight", self.d, self.n_points),
                (&l.attention.out_proj, "attn.out_proj", self.d, self.d),
            ] {
                mlp.validate()?;
                if mlp.in_dim() != in_d || mlp.out_dim() != out_d {
                    return Err(Error::dim(format!(
                        "encoder layer {i} {name}: maps {}->{} but needs {in_d}->{out_d}",
                        mlp.in_dim(),
                        mlp.out_dim()
                    )));
                }
            }
            if l.attention.n_points != self.n_points {
                return Err(Error::dim(format!(
                    "encoder layer {i}: attention has {} points, encoder declares {}",
                    l.attention.n_points, self.n_points
                )));
            }
        }
        Ok(())
    }

    /// Visits every parameter tensor; same order as [`BoundEncoder::vars`].
    pub fn for_each_tensor(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.proj.for_each_tensor(&format!("{prefix}.{i}.proj"), f);
            l.dispatch.for_each_tensor(&format!("{prefix}.{i}.dispatch"), f);
            l.attention.offset.for_each_tensor(&format!("{prefix}.{i}.attn.offset"), f);
            l.attention.weight.for_each_tensor(&format!("{prefix}.{i}.attn.weight"), f);
            l.attention.out_proj.for_each_tensor(&format!("{prefix}.{i}.attn.out_proj"), f);
        }
    }

    /// Mutable variant of [`Self::for_each_tensor`], same traversal order.
    pub fn for_each_tensor_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.proj.for_each_tensor_mut(&format!("{prefix}.{i}.proj"), f);
            l.dispatch.for_each_tensor_mut(&format!("{prefix}.{i}.dispatch"), f);
            l.attention.offset.for_each_tensor_mut(&format!("{prefix}.{i}.attn.offset"), f);
            l.attention.weight.for_each_tensor_mut(&format!("{prefix}.{i}.attn.weight"), f);
            l.attention.out_proj.for_each_tensor_mut(&format!("{prefix}.{i}.attn.out_proj"), f);
        }
    }

    pub fn bind<'t>(&self, tape: &'t crate::numeric::Tape, trainable: bool) -> BoundEncoder<'t> {
        BoundEncoder {
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    proj: l.proj.bind(tape, trainable),
                    dispatch: l.dispatch.bind(tape, trainable),
                    attention: BoundAttention {
                        offset: l.attention.offset.bind(tape, trainable),
                        weight: l.attention.weight.bind(tape, trainable),
                        out_proj: l.attention.out_proj.bind(tape, trainable),
                        n_points: l.attention.n_points,
                    },
                })
                .collect(),
        }
    }
}

/// Tape-bound deformable-attention parameters.
pub struct BoundAttention<'t> {
    pub offset: BoundMlp<'t>,
    pub weight: BoundMlp<'t>,
    pub out_proj: BoundMlp<'t>,
    pub n_points: usize,
}

/// Tape-bound encoder layer.
pub struct BoundLayer<'t> {
    pub proj: BoundMlp<'t>,
    pub dispatch: BoundMlp<'t>,
    pub attention: BoundAttention<'t>,
}

/// Tape-bound encoder parameter set.
pub struct BoundEncoder<'t> {
    pub layers: Vec<BoundLayer<'t>>,
}

impl<'t> BoundEncoder<'t> {
    /// All parameter vars; same order as [`EncoderParams::for_each_tensor`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.proj.vars());
            out.extend(l.dispatch.vars());
            out.extend(l.attention.offset.vars());
            out.extend(l.attention.weight.vars());
            out.extend(l.attention.out_proj.vars());
        }
        out
    }
}

// ── Config & outputs ──

/// Knobs of the encode pipeline.
#[derive(Debug, Clone)]
pub struct EncodeConfig {
    pub encoder_layers: usize,
    pub n_points: usize,
    /// Guard added to the per-row affinity sum in the aggregate step.
    pub eps: f64,
    /// Attention-map grid `(h', w')`; must match the pseudo-mask grid.
    pub grid_hw: (usize, usize),
    /// When false, layers run cross-attention only (no prototype
    /// aggregate/dispatch) — the plain-encoder ablation baseline.
    pub use_prototypes: bool,
}

impl EncodeConfig {
    pub fn new(grid_hw: (usize, usize)) -> Self {
        EncodeConfig { encoder_layers: 3, n_points: 4, eps: 1e-6, grid_hw, use_prototypes: true }
    }
}

/// Raw prototype/query affinities plus the validity mask of the hit slots.
pub struct AffinityMatrix<'t> {
    /// `[N, M, K]`; invalid slots carry [`INVALID_AFFINITY`].
    pub raw: Var<'t>,
    /// `[N, M, K]` constant 0/1 slot-validity mask.
    pub mask: Tensor,
}

impl<'t> AffinityMatrix<'t> {
    /// `sigmoid(raw)` hard-masked so invalid slots are exactly zero.
    pub fn sigma(&self) -> Var<'t> {
        let m = self.raw.tape().constant(self.mask.clone());
        self.raw.sigmoid().mul(m)
    }
}

/// Flattened per-view attention salience over the `(h', w')` grid.
pub struct AttentionMapG<'t> {
    /// `[N, D]`, nonnegative, zero where no query attends.
    pub weights: Var<'t>,
    pub grid_hw: (usize, usize),
}

/// Everything the encoder hands to the decoding and prototype objectives.
pub struct EncodeOutput<'t> {
    /// Encoded query grid, `[cells, d]`.
    pub q_enc: Var<'t>,
    /// Last layer's voxel-space prototypes `[N, M, d]` (absent for 0 layers
    /// or when prototypes are disabled).
    pub p_vox: Option<Var<'t>>,
    /// Last layer's affinity (absent for 0 layers or when prototypes are
    /// disabled).
    pub affinity: Option<AffinityMatrix<'t>>,
    /// Attention map summed over layers.
    pub g: AttentionMapG<'t>,
}

// ── Hit-set helpers ──

fn check_hits(hits: &HitSet, cells: usize) -> Result<()> {
    if hits.k == 0 {
        return Err(Error::dim("hit capacity must be at least 1"));
    }
    for (n, view) in hits.views.iter().enumerate() {
        if view.len() != hits.k {
            return Err(Error::dim(format!(
                "view {n} has {} hit slots, expected {}",
                view.len(),
                hits.k
            )));
        }
        for s in view {
            if s.valid && s.query_index >= cells {
                return Err(Error::data(format!(
                    "view {n} hit slot references cell {} of a {cells}-cell grid",
                    s.query_index
                )));
            }
        }
    }
    Ok(())
}

/// `[N, M, K]` 0/1 validity mask (slot validity broadcast over prototypes).
fn affinity_mask(hits: &HitSet, m: usize) -> Tensor {
    let (n, k) = (hits.views.len(), hits.k);
    let mut data = vec![0.0; n * m * k];
    for (vi, view) in hits.views.iter().enumerate() {
        for (ki, slot) in view.iter().enumerate() {
            if slot.valid {
                for mi in 0..m {
                    data[(vi * m + mi) * k + ki] = 1.0;
                }
            }
        }
    }
    Tensor::from_parts(vec![n, m, k], data)
}

/// `[K, d]` 0/1 validity mask for one view.
fn view_slot_mask(hits: &HitSet, view: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; hits.k * d];
    for (ki, slot) in hits.views[view].iter().enumerate() {
        if slot.valid {
            data[ki * d..(ki + 1) * d].fill(1.0);
        }
    }
    Tensor::from_parts(vec![hits.k, d], data)
}

fn view_indices(hits: &HitSet, view: usize) -> Vec<usize> {
    hits.views[view].iter().map(|s| s.query_index).collect()
}

/// `[K·p, 2]` reference points: each slot's `q_c` repeated per sample point.
fn view_ref_points(hits: &HitSet, view: usize, points: usize) -> Tensor {
    let mut data = Vec::with_capacity(hits.k * points * 2);
    for slot in &hits.views[view] {
        for _ in 0..points {
            data.extend_from_slice(&slot.q_c);
        }
    }
    Tensor::from_parts(vec![hits.k * points, 2], data)
}

// ── Core ops ──

/// Gathers the hit queries `Q'` from the grid: `[cells, d] -> [N, K, d]`
/// (invalid slots gather cell 0 and are masked by every consumer).
pub fn gather_hit_queries<'t>(grid: Var<'t>, hits: &HitSet) -> Result<Var<'t>> {
    let shape = grid.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("query grid must be [cells, d], got {shape:?}")));
    }
    check_hits(hits, shape[0])?;
    let views: Vec<Var<'t>> = (0..hits.views.len())
        .map(|n| grid.gather_rows(view_indices(hits, n)))
        .collect();
    Ok(Var::stack0(&views))
}

/// Pairwise cosine affinity between projected prototypes and hit queries.
///
/// `p_img_proj [N, M, d]`, `q_hit [N, K, d]` → raw `[N, M, K]`; invalid
/// slots are overwritten with [`INVALID_AFFINITY`].
pub fn compute_affinity<'t>(
    p_img_proj: Var<'t>,
    q_hit: Var<'t>,
    hits: &HitSet,
) -> Result<AffinityMatrix<'t>> {
    let (ps, qs) = (p_img_proj.shape(), q_hit.shape());
    if ps.len() != 3 || qs.len() != 3 || ps[0] != qs[0] || ps[2] != qs[2] {
        return Err(Error::dim(format!(
            "affinity expects [N, M, d] and [N, K, d], got {ps:?} and {qs:?}"
        )));
    }
    if qs[0] != hits.views.len() || qs[1] != hits.k {
        return Err(Error::dim(format!(
            "hit set has {} views x {} slots, queries are {qs:?}",
            hits.views.len(),
            hits.k
        )));
    }
    let (n, m) = (ps[0], ps[1]);
    let per_view: Vec<Var<'t>> = (0..n)
        .map(|vi| p_img_proj.index_axis0(vi).cosine_matrix(q_hit.index_axis0(vi)))
        .collect();
    let raw = Var::stack0(&per_view);
    let mask = affinity_mask(hits, m);
    let bias = mask.map(|v| (1.0 - v) * INVALID_AFFINITY);
    let tape = raw.tape();
    let masked = raw.mul(tape.constant(mask.clone())).add(tape.constant(bias));
    Ok(AffinityMatrix { raw: masked, mask })
}

/// Lifts prototypes into voxel space as a guarded weighted mean:
/// `P_vox[n,m] = (P̂_img[n,m] + Σ_k σ(A)[n,m,k]·Q'[n,k]) / (eps + Σ_k σ(A)[n,m,k])`.
///
/// A view with no valid slots degrades to `P̂_img/eps`; every consumer of
/// that view is hard-masked to zero, so the magnitude never propagates.
pub fn aggregate<'t>(
    p_img_proj: Var<'t>,
    q_hit: Var<'t>,
    a: &AffinityMatrix<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param(format!("aggregate eps must be positive, got {eps}")));
    }
    let shape = p_img_proj.shape();
    let (n, m) = (shape[0], shape[1]);
    let tape = p_img_proj.tape();
    let sig = a.sigma();
    let per_view: Vec<Var<'t>> = (0..n)
        .map(|vi| {
            let s = sig.index_axis0(vi); // [M, K]
            let r = s.sum_last().offset(eps); // [M]
            let inv = tape.constant(Tensor::full(&[m], 1.0)).div(r);
            let num = p_img_proj.index_axis0(vi).add(s.matmul(q_hit.index_axis0(vi)));
            num.scale_rows(inv)
        })
        .collect();
    Ok(Var::stack0(&per_view))
}

/// Sends voxel-space prototypes back to the hit queries as a residual:
/// `Q̃[n,k] = Q'[n,k] + MLP(Σ_m σ(A)[n,m,k]·P_vox[n,m])`; invalid slots pass
/// `Q'` through unchanged.
pub fn dispatch<'t>(
    q_hit: Var<'t>,
    a: &AffinityMatrix<'t>,
    p_vox: Var<'t>,
    mlp: &BoundMlp<'t>,
    hits: &HitSet,
) -> Result<Var<'t>> {
    let qs = q_hit.shape();
    let (n, d) = (qs[0], qs[2]);
    let tape = q_hit.tape();
    let sig = a.sigma();
    let mut per_view = Vec::with_capacity(n);
    for vi in 0..n {
        let msg = sig.index_axis0(vi).transpose2d().matmul(p_vox.index_axis0(vi)); // [K, d]
        let delta = mlp.forward(msg)?.mul(tape.constant(view_slot_mask(hits, vi, d)));
        per_view.push(q_hit.index_axis0(vi).add(delta));
    }
    Ok(Var::stack0(&per_view))
}

/// Deformable cross-attention from the hit queries into the feature maps.
///
/// Per valid slot: `n_points` offsets predicted from the query are added to
/// its reference point, the feature map is bilinearly sampled there,
/// softmax point weights combine the samples, and the projected result is
/// scatter-added into the query grid at the slot's cell. Returns the
/// updated grid and the attention map `G [N, D]`, which floor-quantises
/// each in-bounds sample location to a `(h', w')` cell and accumulates its
/// attention weight (samples outside `[0,1)²` contribute nothing).
pub fn deformable_cross_attention<'t>(
    grid: Var<'t>,
    q_tilde: Var<'t>,
    fmaps: &FeatureMaps,
    hits: &HitSet,
    grid_hw: (usize, usize),
    attn: &BoundAttention<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (gh, gw) = grid_hw;
    if gh == 0 || gw == 0 {
        return Err(Error::param("attention-map grid must be nonzero"));
    }
    let cells = grid.shape()[0];
    check_hits(hits, cells)?;
    if hits.views.len() != fmaps.views.len() {
        return Err(Error::dim(format!(
            "{} hit views vs {} feature views",
            hits.views.len(),
            fmaps.views.len()
        )));
    }
    let (n, k, d) = {
        let s = q_tilde.shape();
        (s[0], s[1], s[2])
    };
    if n != hits.views.len() || k != hits.k {
        return Err(Error::dim(format!(
            "q_tilde shape {:?} does not match {} views x {} slots",
            q_tilde.shape(),
            hits.views.len(),
            hits.k
        )));
    }
    let p = attn.n_points;
    let tape = grid.tape();
    let mut out = grid;
    let mut g_views = Vec::with_capacity(n);
    for vi in 0..n {
        let q_n = q_tilde.index_axis0(vi); // [K, d]
        let refs = tape.constant(view_ref_points(hits, vi, p));
        let coords = attn.offset.forward(q_n)?.reshape(vec![k * p, 2]).add(refs);
        let weights = attn.weight.forward(q_n)?.softmax_last(1.0); // [K, P]
        let fmap = tape.constant(fmaps.views[vi].clone());
        let sampled = fmap.bilinear_sample(coords).reshape(vec![k, p, fmaps.d]);
        let agg = sampled.weighted_point_sum(weights); // [K, d_f]
        let delta = attn
            .out_proj
            .forward(agg)?
            .mul(tape.constant(view_slot_mask(hits, vi, d)));
        out = out.add(delta.scatter_rows(view_indices(hits, vi), cells));

        // Floor-quantised scatter of the in-bounds attention weights.
        let cv = coords.value();
        let cd = cv.data();
        let bins: Vec<Option<usize>> = (0..k * p)
            .map(|j| {
                if !hits.views[vi][j / p].valid {
                    return None;
                }
                let (x, y) = (cd[2 * j], cd[2 * j + 1]);
                if !x.is_finite() || !y.is_finite() {
                    return None;
                }
                let (px, py) = ((x * gw as f64).floor(), (y * gh as f64).floor());
                if px < 0.0 || py < 0.0 || px >= gw as f64 || py >= gh as f64 {
                    return None;
                }
                Some(py as usize * gw + px as usize)
            })
            .collect();
        g_views.push(
            weights
                .reshape(vec![1, k * p])
                .scatter_add_last(bins, gh * gw)
                .reshape(vec![gh * gw]),
        );
    }
    Ok((out, Var::stack0(&g_views)))
}

// ── Orchestration ──

/// Runs prototype grouping over rendered feature maps (initial grid means
/// plus the default soft-assignment refinement).
pub fn prepare_prototypes(
    fmaps: &FeatureMaps,
    r: usize,
    iters: usize,
    assign_tau: f64,
) -> Result<PrototypeSet2D> {
    let init = init_prototypes_views(&fmaps.views, r)?;
    iterate_prototypes(&fmaps.views, &init, iters, assign_tau)
}

/// Full view transformation: per layer, project prototypes, compute
/// affinity against the current hit queries, aggregate, dispatch, and
/// cross-attend; dispatch and attention residuals are scatter-added into
/// the query grid. `G` is summed over layers; the last layer's affinity and
/// voxel prototypes are returned for the prototype-level objective.
pub fn encode<'t>(
    query: Var<'t>,
    extents: [usize; 3],
    hits: &HitSet,
    fmaps: &FeatureMaps,
    protos: &PrototypeSet2D,
    enc: &BoundEncoder<'t>,
    cfg: &EncodeConfig,
) -> Result<EncodeOutput<'t>> {
    let cells: usize = extents.iter().product();
    let qs = query.shape();
    if qs.len() != 2 || qs[0] != cells {
        return Err(Error::dim(format!(
            "query grid shape {qs:?} does not match extents {extents:?} ({cells} cells)"
        )));
    }
    let d = qs[1];
    check_hits(hits, cells)?;
    if enc.layers.len() != cfg.encoder_layers {
        return Err(Error::config(
            "encoder_layers",
            format!("config says {} layers, parameters have {}", cfg.encoder_layers, enc.layers.len()),
        ));
    }
    let n = hits.views.len();
    if fmaps.views.len() != n || protos.num_views() != n {
        return Err(Error::dim(format!(
            "{n} hit views, {} feature views, {} prototype views",
            fmaps.views.len(),
            protos.num_views()
        )));
    }
    if protos.dim() != d || fmaps.d != d {
        return Err(Error::dim(format!(
            "channel mismatch: queries d={d}, prototypes d={}, features d={}",
            protos.dim(),
            fmaps.d
        )));
    }
    let tape = query.tape();
    let p_img = tape.constant(protos.features.clone());
    let dg = cfg.grid_hw.0 * cfg.grid_hw.1;
    let mut grid = query;
    let mut g_total: Option<Var<'t>> = None;
    let mut last: Option<(AffinityMatrix<'t>, Var<'t>)> = None;
    for layer in &enc.layers {
        let q_hit = gather_hit_queries(grid, hits)?;
        let (mid, q_tilde) = if cfg.use_prototypes {
            let p_proj = layer.proj.forward(p_img)?;
            let a = compute_affinity(p_proj, q_hit, hits)?;
            let p_vox = aggregate(p_proj, q_hit, &a, cfg.eps)?;
            let q_tilde = dispatch(q_hit, &a, p_vox, &layer.dispatch, hits)?;
            // Scatter the dispatch residual into the grid, then cross-attend.
            let mut mid = grid;
            for vi in 0..n {
                let delta = q_tilde.index_axis0(vi).sub(q_hit.index_axis0(vi));
                mid = mid.add(delta.scatter_rows(view_indices(hits, vi), cells));
            }
            last = Some((a, p_vox));
            (mid, q_tilde)
        } else {
            (grid, q_hit)
        };
        let (next, g) =
            deformable_cross_attention(mid, q_tilde, fmaps, hits, cfg.grid_hw, &layer.attention)?;
        grid = next;
        g_total = Some(match g_total {
            Some(acc) => acc.add(g),
            None => g,
        });
    }
    let g = AttentionMapG {
        weights: g_total.unwrap_or_else(|| tape.constant(Tensor::zeros(&[n, dg]))),
        grid_hw: cfg.grid_hw,
    };
    let (affinity, p_vox) = match last {
        Some((a, p)) => (Some(a), Some(p)),
        None => (None, None),
    };
    Ok(EncodeOutput { q_enc: grid, p_vox, affinity, g })
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check_multi, Tape};
    use crate::scene::HitSlot;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn slots(view: &[(usize, [f64; 2], bool)]) -> Vec<HitSlot> {
        view.iter()
            .map(|&(query_index, q_c, valid)| HitSlot { query_index, q_c, valid })
            .collect()
    }

    fn hitset(views: Vec<Vec<HitSlot>>) -> HitSet {
        let k = views[0].len();
        HitSet { views, k }
    }

    /// Scalar-by-scalar Eq. 1a reference.
    fn naive_aggregate(p: &Tensor, q: &Tensor, raw: &Tensor, mask: &Tensor, eps: f64) -> Tensor {
        let (n, m, d) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        let k = q.shape()[1];
        let mut out = vec![0.0; n * m * d];
        for vi in 0..n {
            for mi in 0..m {
                let mut r = eps;
                for ki in 0..k {
                    r += sigmoid(raw.at(&[vi, mi, ki])) * mask.at(&[vi, mi, ki]);
                }
                for c in 0..d {
                    let mut acc = p.at(&[vi, mi, c]);
                    for ki in 0..k {
                        acc += sigmoid(raw.at(&[vi, mi, ki]))
                            * mask.at(&[vi, mi, ki])
                            * q.at(&[vi, ki, c]);
                    }
                    out[(vi * m + mi) * d + c] = acc / r;
                }
            }
        }
        Tensor::from_parts(vec![n, m, d], out)
    }

    #[test]
    fn affinity_matches_hand_cosine_table_and_masks_invalid_slots() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_parts(
            vec![1, 2, 2],
            vec![1.0, 0.0, 3.0, 4.0],
        ));
        let q = tape.constant(Tensor::from_parts(
            vec![1, 2, 2],
            vec![1.0, 0.0, -2.0, 1.0],
        ));
        let hits = hitset(vec![slots(&[(0, [0.1, 0.1], true), (1, [0.2, 0.2], true)])]);
        let a = compute_affinity(p, q, &hits).unwrap();
        let v = a.raw.value();
        // Hand cosine table for {[1,0],[3,4]} x {[1,0],[-2,1]}.
        let expect = [
            1.0,
            -2.0 / 5f64.sqrt(),
            3.0 / 5.0,
            (-6.0 + 4.0) / (5.0 * 5f64.sqrt()),
        ];
        for (i, e) in expect.iter().enumerate() {
            assert!((v.data()[i] - e).abs() < 1e-12, "entry {i}");
        }

        let hits2 = hitset(vec![slots(&[(0, [0.1, 0.1], true), (0, [0.0, 0.0], false)])]);
        let a2 = compute_affinity(p, q, &hits2).unwrap();
        let raw2 = a2.raw.value();
        assert_eq!(raw2.at(&[0, 0, 1]), INVALID_AFFINITY);
        let sig = a2.sigma().value();
        assert_eq!(sig.at(&[0, 0, 1]), 0.0, "masked slot is exactly zero");
        assert_eq!(sig.at(&[0, 1, 1]), 0.0);
        assert!((sig.at(&[0, 0, 0]) - sigmoid(1.0)).abs() < 1e-15);
    }

    #[test]
    fn aggregate_hand_values() {
        let tape = Tape::new();
        // d=1, K=1: sigma(0)=0.5, P_vox = (1 + 0.5*2)/0.5 = 4.
        let p = tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![1.0]));
        let q = tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![2.0]));
        let hits = hitset(vec![slots(&[(0, [0.0, 0.0], true)])]);
        let a = AffinityMatrix {
            raw: tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![0.0])),
            mask: Tensor::full(&[1, 1, 1], 1.0),
        };
        let out = aggregate(p, q, &a, 1e-12).unwrap().value();
        assert!((out.item() - 4.0).abs() < 1e-9);

        // Saturated affinity: P_vox -> P̂ + Q'.
        let a_sat = AffinityMatrix {
            raw: tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![40.0])),
            mask: Tensor::full(&[1, 1, 1], 1.0),
        };
        let out = aggregate(p, q, &a_sat, 1e-12).unwrap().value();
        assert!((out.item() - 3.0).abs() < 1e-9);

        // K=2: (0 + 0.5*2 + 0.5*4) / 1 = 3.
        let p0 = tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![0.0]));
        let q2 = tape.constant(Tensor::from_parts(vec![1, 2, 1], vec![2.0, 4.0]));
        let a2 = AffinityMatrix {
            raw: tape.constant(Tensor::zeros(&[1, 1, 2])),
            mask: Tensor::full(&[1, 1, 2], 1.0),
        };
        let out = aggregate(p0, q2, &a2, 1e-12).unwrap().value();
        assert!((out.item() - 3.0).abs() < 1e-9);
        let _ = hits;
    }

    #[test]
    fn aggregate_matches_loop_oracle_and_slot_permutation() {
        let rng = StreamRng::new(33);
        let (n, m, k, d) = (2, 3, 5, 3);
        let pt = rng.normal_tensor("p", 0, &[n, m, d], 0.8);
        let qt = rng.normal_tensor("q", 0, &[n, k, d], 0.8);
        let valid = [true, false, true, true, false];
        let mk = |order: &[usize]| {
            hitset(
                (0..n)
                    .map(|_| {
                        order
                            .iter()
                            .map(|&i| HitSlot {
                                query_index: i,
                                q_c: [0.0, 0.0],
                                valid: valid[i],
                            })
                            .collect()
                    })
                    .collect(),
            )
        };
        let hits = mk(&[0, 1, 2, 3, 4]);

        let tape = Tape::new();
        let p = tape.constant(pt.clone());
        let q = tape.constant(qt.clone());
        let a = compute_affinity(p, q, &hits).unwrap();
        let got = aggregate(p, q, &a, 1e-6).unwrap().value();
        let want = naive_aggregate(&pt, &qt, &a.raw.value(), &a.mask, 1e-6);
        assert!(got.max_abs_diff(&want) < 1e-10);

        // Permuting the hit slots (and query rows) leaves P_vox unchanged.
        let perm = [3usize, 0, 4, 1, 2];
        let hits_p = mk(&perm);
        let mut qd = vec![0.0; n * k * d];
        for vi in 0..n {
            for (ki, &src) in perm.iter().enumerate() {
                for c in 0..d {
                    qd[(vi * k + ki) * d + c] = qt.at(&[vi, src, c]);
                }
            }
        }
        let tape2 = Tape::new();
        let p2 = tape2.constant(pt.clone());
        let q2 = tape2.constant(Tensor::from_parts(vec![n, k, d], qd));
        let a2 = compute_affinity(p2, q2, &hits_p).unwrap();
        let got_p = aggregate(p2, q2, &a2, 1e-6).unwrap().value();
        assert!(got_p.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn dispatch_hand_values_passthrough_and_residual() {
        // Identity MLP, scalar case: Q'=2, sigma(A)=1, P_vox=3 -> Q̃=5.
        let tape = Tape::new();
        let ident = MlpParams {
            layers: vec![crate::numeric::LayerSpec {
                weight: Tensor::from_parts(vec![1, 1], vec![1.0]),
                bias: Tensor::zeros(&[1]),
                act: Activation::Identity,
            }],
        };
        let bound = ident.bind(&tape, false);
        let q = tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![2.0]));
        let p_vox = tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![3.0]));
        let hits = hitset(vec![slots(&[(0, [0.0, 0.0], true)])]);
        let a = AffinityMatrix {
            raw: tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![40.0])),
            mask: Tensor::full(&[1, 1, 1], 1.0),
        };
        let out = dispatch(q, &a, p_vox, &bound, &hits).unwrap().value();
        assert!((out.item() - 5.0).abs() < 1e-12);

        // Near-zero sigma with a zero-bias MLP: Q̃ ≈ Q'.
        let a_cold = AffinityMatrix {
            raw: tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![INVALID_AFFINITY])),
            mask: Tensor::full(&[1, 1, 1], 1.0),
        };
        let out = dispatch(q, &a_cold, p_vox, &bound, &hits).unwrap().value();
        assert!((out.item() - 2.0).abs() < 1e-9);

        // Invalid slot: exact passthrough even with a biased MLP.
        let biased = MlpParams {
            layers: vec![crate::numeric::LayerSpec {
                weight: Tensor::from_parts(vec![1, 1], vec![2.0]),
                bias: Tensor::full(&[1], 7.0),
                act: Activation::Identity,
            }],
        };
        let bound_b = biased.bind(&tape, false);
        let hits_inv = hitset(vec![slots(&[(0, [0.0, 0.0], false)])]);
        let a_inv = AffinityMatrix {
            raw: tape.constant(Tensor::from_parts(vec![1, 1, 1], vec![INVALID_AFFINITY])),
            mask: Tensor::zeros(&[1, 1, 1]),
        };
        let out = dispatch(q, &a_inv, p_vox, &bound_b, &hits_inv).unwrap().value();
        assert_eq!(out.item(), 2.0);
    }

    #[test]
    fn dispatch_matches_loop_oracle() {
        let rng = StreamRng::new(71);
        let (n, m, k, d) = (1, 2, 3, 2);
        let pt = rng.normal_tensor("p", 0, &[n, m, d], 0.7);
        let qt = rng.normal_tensor("q", 0, &[n, k, d], 0.7);
        let mlp = MlpParams::init(&[d, d], &[Activation::Identity], &rng, "mlp");
        let hits = hitset(vec![slots(&[
            (0, [0.0, 0.0], true),
            (1, [0.0, 0.0], true),
            (2, [0.0, 0.0], false),
        ])]);
        let tape = Tape::new();
        let p = tape.constant(pt.clone());
        let q = tape.constant(qt.clone());
        let a = compute_affinity(p, q, &hits).unwrap();
        let p_vox = aggregate(p, q, &a, 1e-6).unwrap();
        let got = dispatch(q, &a, p_vox, &mlp.bind(&tape, false), &hits).unwrap().value();

        // Triple-loop reference: message, MLP, mask, residual.
        let pv = p_vox.value();
        let raw = a.raw.value();
        for vi in 0..n {
            for ki in 0..k {
                let mut msg = vec![0.0; d];
                for mi in 0..m {
                    let s = sigmoid(raw.at(&[vi, mi, ki])) * a.mask.at(&[vi, mi, ki]);
                    for c in 0..d {
                        msg[c] += s * pv.at(&[vi, mi, c]);
                    }
                }
                let h = mlp
                    .forward_tensor(&Tensor::from_parts(vec![d], msg))
                    .unwrap();
                let valid = hits.views[vi][ki].valid;
                for c in 0..d {
                    let want =
                        qt.at(&[vi, ki, c]) + if valid { h.data()[c] } else { 0.0 };
                    assert!((got.at(&[vi, ki, c]) - want).abs() < 1e-10);
                }
            }
        }
    }

    /// Identity attention block: one point, zero offsets, unit projection.
    fn identity_attention(d: usize) -> AttentionParams {
        let mut eye = Tensor::zeros(&[d, d]).data().to_vec();
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        AttentionParams {
            offset: MlpParams {
                layers: vec![crate::numeric::LayerSpec {
                    weight: Tensor::zeros(&[2, d]),
                    bias: Tensor::zeros(&[2]),
                    act: Activation::Identity,
                }],
            },
            weight: MlpParams {
                layers: vec![crate::numeric::LayerSpec {
                    weight: Tensor::zeros(&[1, d]),
                    bias: Tensor::zeros(&[1]),
                    act: Activation::Identity,
                }],
            },
            out_proj: MlpParams {
                layers: vec![crate::numeric::LayerSpec {
                    weight: Tensor::from_parts(vec![d, d], eye),
                    bias: Tensor::zeros(&[d]),
                    act: Activation::Identity,
                }],
            },
            n_points: 1,
        }
    }

    #[test]
    fn attention_single_point_identity_samples_bilinearly() {
        // 2x2 map [[1,2],[3,4]], query at the center -> delta 2.5; the
        // center lands in G cell (1,1) of a 2x2 attention grid.
        let fmaps = FeatureMaps {
            views: vec![Tensor::from_parts(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])],
            feat_h: 2,
            feat_w: 2,
            d: 1,
        };
        let hits = hitset(vec![slots(&[(0, [0.5, 0.5], true)])]);
        let params = identity_attention(1);
        let tape = Tape::new();
        let bound = BoundAttention {
            offset: params.offset.bind(&tape, false),
            weight: params.weight.bind(&tape, false),
            out_proj: params.out_proj.bind(&tape, false),
            n_points: 1,
        };
        let grid = tape.constant(Tensor::zeros(&[1, 1]));
        let q_tilde = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let (q_enc, g) =
            deformable_cross_attention(grid, q_tilde, &fmaps, &hits, (2, 2), &bound).unwrap();
        assert!((q_enc.value().item() - 2.5).abs() < 1e-12);
        let gv = g.value();
        assert_eq!(gv.shape(), &[1, 4]);
        assert_eq!(gv.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_g_conserves_in_bounds_weight_mass() {
        let rng = StreamRng::new(5);
        let (k, d, p) = (6, 3, 3);
        let fmaps = FeatureMaps {
            views: vec![rng.normal_tensor("f", 0, &[d, 5, 7], 0.5)],
            feat_h: 5,
            feat_w: 7,
            d,
        };
        // Two invalid slots and one reference point far outside the image.
        let hits = hitset(vec![slots(&[
            (0, [0.23, 0.31], true),
            (1, [0.61, 0.57], true),
            (2, [0.0, 0.0], false),
            (3, [2.5, 0.4], true),
            (4, [0.41, 0.83], true),
            (5, [0.0, 0.0], false),
        ])]);
        let params = AttentionParams::init(d, p, &rng, "attn");
        let q_t = rng.normal_tensor("q", 0, &[1, k, d], 0.6);
        let tape = Tape::new();
        let bound = BoundAttention {
            offset: params.offset.bind(&tape, false),
            weight: params.weight.bind(&tape, false),
            out_proj: params.out_proj.bind(&tape, false),
            n_points: p,
        };
        let grid = tape.constant(Tensor::zeros(&[k, d]));
        let q_tilde = tape.constant(q_t.clone());
        let (_, g) =
            deformable_cross_attention(grid, q_tilde, &fmaps, &hits, (3, 3), &bound).unwrap();
        let g_sum: f64 = g.value().data().iter().sum();
        assert!(g.value().data().iter().all(|&v| v >= 0.0));

        // Oracle: per-slot softmax weights of in-bounds points (offsets are
        // zero-initialised, so points sit at the reference locations).
        let logits = params
            .weight
            .forward_tensor(&q_t.reshape(vec![k, d]).unwrap())
            .unwrap();
        let soft = crate::numeric::softmax_with_temperature(&logits, 1.0).unwrap();
        let mut want = 0.0;
        for (ki, slot) in hits.views[0].iter().enumerate() {
            if !slot.valid || slot.q_c[0] >= 1.0 {
                continue;
            }
            for pi in 0..p {
                want += soft.at(&[ki, pi]);
            }
        }
        assert!((g_sum - want).abs() < 1e-9, "got {g_sum}, want {want}");
        // Per-slot weights are a softmax: each valid in-bounds slot adds 1.
        assert!((g_sum - 3.0).abs() < 1e-9);
    }

    #[test]
    fn gradcheck_affinity_aggregate_dispatch() {
        let rng = StreamRng::new(9);
        let (n, m, k, d) = (2, 2, 3, 2);
        let pt = rng.normal_tensor("p", 0, &[n, m, d], 0.7);
        let qt = rng.normal_tensor("q", 0, &[n, k, d], 0.7);
        let hits = hitset(
            (0..n)
                .map(|_| {
                    slots(&[
                        (0, [0.2, 0.2], true),
                        (1, [0.4, 0.4], true),
                        (2, [0.0, 0.0], false),
                    ])
                })
                .collect(),
        );
        let mlp = MlpParams::init(&[d, d, d], &[Activation::Relu, Activation::Identity], &rng, "m");

        let rep = grad_check_multi(
            |_, xs| compute_affinity(xs[0], xs[1], &hits).unwrap().raw.sum_all(),
            &[pt.clone(), qt.clone()],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "affinity: {rep:?}");

        let rep = grad_check_multi(
            |_, xs| {
                let a = compute_affinity(xs[0], xs[1], &hits).unwrap();
                aggregate(xs[0], xs[1], &a, 1e-6).unwrap().sum_all()
            },
            &[pt.clone(), qt.clone()],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "aggregate: {rep:?}");

        let rep = grad_check_multi(
            |t, xs| {
                let a = compute_affinity(xs[0], xs[1], &hits).unwrap();
                let pv = aggregate(xs[0], xs[1], &a, 1e-6).unwrap();
                dispatch(xs[1], &a, pv, &mlp.bind(t, false), &hits)
                    .unwrap()
                    .sum_all()
            },
            &[pt, qt],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "dispatch: {rep:?}");
    }

    #[test]
    fn gradcheck_attention() {
        let rng = StreamRng::new(13);
        let (cells, d, p) = (4, 3, 2);
        let fmaps = FeatureMaps {
            views: vec![rng.normal_tensor("f", 0, &[d, 5, 7], 0.5)],
            feat_h: 5,
            feat_w: 7,
            d,
        };
        // Interior reference points away from bilinear kinks.
        let hits = hitset(vec![slots(&[
            (0, [0.23, 0.31], true),
            (1, [0.61, 0.57], true),
            (2, [0.41, 0.83], true),
            (3, [0.0, 0.0], false),
        ])]);
        let mut params = AttentionParams::init(d, p, &rng, "attn");
        // Small nonzero offset weights keep samples near the (kink-free)
        // reference points while still exercising the coordinate gradient.
        params.offset.layers[0].weight =
            rng.normal_tensor("offw", 0, &[2 * p, d], 0.005);
        let grid0 = rng.normal_tensor("grid", 0, &[cells, d], 0.6);
        let rep = grad_check_multi(
            |t, xs| {
                let bound = BoundAttention {
                    offset: params.offset.bind(t, false),
                    weight: params.weight.bind(t, false),
                    out_proj: params.out_proj.bind(t, false),
                    n_points: p,
                };
                let q_tilde = gather_hit_queries(xs[0], &hits).unwrap();
                let (q_enc, g) =
                    deformable_cross_attention(xs[0], q_tilde, &fmaps, &hits, (3, 3), &bound)
                        .unwrap();
                q_enc.sum_all().add(g.sum_all())
            },
            &[grid0],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "attention: {rep:?}");
    }

    #[test]
    fn encode_zero_layers_is_identity() {
        let rng = StreamRng::new(2);
        let extents = [2, 2, 1];
        let d = 3;
        let fmaps = FeatureMaps {
            views: vec![rng.normal_tensor("f", 0, &[d, 4, 4], 0.5)],
            feat_h: 4,
            feat_w: 4,
            d,
        };
        let protos = prepare_prototypes(&fmaps, 2, 2, 0.07).unwrap();
        let hits = hitset(vec![slots(&[(0, [0.3, 0.3], true), (2, [0.6, 0.6], true)])]);
        let params = EncoderParams::init(d, 2, 0, &rng);
        let tape = Tape::new();
        let grid0 = rng.normal_tensor("g", 0, &[4, d], 0.5);
        let query = tape.constant(grid0.clone());
        let mut cfg = EncodeConfig::new((2, 2));
        cfg.encoder_layers = 0;
        let out = encode(query, extents, &hits, &fmaps, &protos, &params.bind(&tape, false), &cfg)
            .unwrap();
        assert_eq!(out.q_enc.value(), grid0);
        assert!(out.p_vox.is_none() && out.affinity.is_none());
        assert_eq!(out.g.weights.value(), Tensor::zeros(&[1, 4]));
    }

    #[test]
    fn encode_matches_manual_composition_and_is_deterministic() {
        let rng = StreamRng::new(17);
        let extents = [2, 2, 2];
        let (cells, d, n_points) = (8, 4, 2);
        let fmaps = FeatureMaps {
            views: vec![
                rng.normal_tensor("f", 0, &[d, 6, 6], 0.5),
                rng.normal_tensor("f", 1, &[d, 6, 6], 0.5),
            ],
            feat_h: 6,
            feat_w: 6,
            d,
        };
        let protos = prepare_prototypes(&fmaps, 3, 2, 0.07).unwrap();
        let hits = hitset(vec![
            slots(&[(0, [0.21, 0.37], true), (3, [0.58, 0.42], true), (5, [0.7, 0.7], true)]),
            slots(&[(1, [0.44, 0.62], true), (6, [0.31, 0.28], true), (0, [0.0, 0.0], false)]),
        ]);
        let params = EncoderParams::init(d, n_points, 1, &rng);
        params.validate().unwrap();
        let grid0 = rng.normal_tensor("g", 0, &[cells, d], 0.5);
        let mut cfg = EncodeConfig::new((2, 2));
        cfg.encoder_layers = 1;

        let run = || {
            let tape = Tape::new();
            let query = tape.constant(grid0.clone());
            let bound = params.bind(&tape, false);
            let out = encode(query, extents, &hits, &fmaps, &protos, &bound, &cfg).unwrap();
            (out.q_enc.value(), out.p_vox.unwrap().value(), out.g.weights.value())
        };
        let (q1, p1, g1) = run();
        let (q2, p2, g2) = run();
        assert_eq!(q1, q2);
        assert_eq!(p1, p2);
        assert_eq!(g1, g2);

        // Manual composition of the published ops reproduces encode.
        let tape = Tape::new();
        let query = tape.constant(grid0.clone());
        let bound = params.bind(&tape, false);
        let layer = &bound.layers[0];
        let p_img = tape.constant(protos.features.clone());
        let q_hit = gather_hit_queries(query, &hits).unwrap();
        let p_proj = layer.proj.forward(p_img).unwrap();
        let a = compute_affinity(p_proj, q_hit, &hits).unwrap();
        let p_vox = aggregate(p_proj, q_hit, &a, cfg.eps).unwrap();
        let q_tilde = dispatch(q_hit, &a, p_vox, &layer.dispatch, &hits).unwrap();
        let mut mid = query;
        for vi in 0..2 {
            let delta = q_tilde.index_axis0(vi).sub(q_hit.index_axis0(vi));
            mid = mid.add(delta.scatter_rows(view_indices(&hits, vi), cells));
        }
        let (q_enc, g) =
            deformable_cross_attention(mid, q_tilde, &fmaps, &hits, cfg.grid_hw, &layer.attention)
                .unwrap();
        assert!(q_enc.value().max_abs_diff(&q1) < 1e-14);
        assert!(g.value().max_abs_diff(&g1) < 1e-14);
        assert!(p_vox.value().max_abs_diff(&p1) < 1e-14);
    }

    #[test]
    fn params_traversal_matches_bound_vars() {
        let rng = StreamRng::new(3);
        let params = EncoderParams::init(3, 2, 2, &rng);
        let mut names = Vec::new();
        params.for_each_tensor("encoder", &mut |name, _| names.push(name));
        let tape = Tape::new();
        let vars = params.bind(&tape, true).vars();
        assert_eq!(names.len(), vars.len());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "names are unique");
        // Spot-check order alignment: tensor i matches var i by shape.
        let mut tensors = Vec::new();
        params.for_each_tensor("encoder", &mut |_, t| tensors.push(t.clone()));
        for (t, v) in tensors.iter().zip(&vars) {
            assert_eq!(t.shape(), v.shape().as_slice());
        }
    }
}
