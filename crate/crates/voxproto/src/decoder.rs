//! Multi-perspective occupancy decoding.
//!
//! The encoded query grid is decoded several times: once as-is (branch 0)
//! and once per augmented copy (feature-level dropout/noise or
//! spatial-level transpose/flip). Every branch runs through the same
//! shared-weight transposed-convolution upsampler and per-cell classifier;
//! spatial branches are re-aligned to the canonical frame before
//! classification so all branches predict over the same cells. A sharpened
//! average of the branch distributions serves as the (detached) target of
//! the scene consistency loss.
//!
//! Spatial tensors are `[c, Z, Y, X]`: flattening the three spatial dims
//! row-major yields the canonical x-fastest cell order used everywhere
//! else, so `[cells, c]` grids and `[c, Z, Y, X]` tensors are two views of
//! the same layout.

use crate::error::{Error, Result};
use crate::numeric::{Activation, BoundMlp, MlpParams, StreamRng, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Default dropout probability for the feature-level augmentation.
pub const DEFAULT_DROPOUT_P: f64 = 0.1;
/// Default noise scale, as a fraction of the feature standard deviation.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
/// Default sharpening / consistency temperature.
pub const DEFAULT_TAU_CONS: f64 = 0.3;

// ── Augmentations ──

/// World axis of the query grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    /// Tensor dimension of this axis in a `[c, Z, Y, X]` tensor.
    fn dim(self) -> usize {
        match self {
            Axis::X => 3,
            Axis::Y => 2,
            Axis::Z => 1,
        }
    }
}

/// One voxel augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationSpec {
    /// Zero each feature element with probability `p` (no rescaling).
    RandomDropout { p: f64 },
    /// Add Gaussian noise with `sigma` × the grid's feature std.
    GaussianNoise { sigma: f64 },
    /// Swap two spatial axes (their extents must match).
    Transpose { a: Axis, b: Axis },
    /// Reverse the listed spatial axes.
    Flip { axes: Vec<Axis> },
}

/// Augmentation family: feature-level specs perturb values, spatial-level
/// specs move cells and need re-alignment after decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugCategory {
    Feature,
    Spatial,
}

impl AugmentationSpec {
    pub fn category(&self) -> AugCategory {
        match self {
            AugmentationSpec::RandomDropout { .. } | AugmentationSpec::GaussianNoise { .. } => {
                AugCategory::Feature
            }
            AugmentationSpec::Transpose { .. } | AugmentationSpec::Flip { .. } => {
                AugCategory::Spatial
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentationSpec::RandomDropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::param(format!("dropout p must be in [0,1), got {p}")));
                }
            }
            AugmentationSpec::GaussianNoise { sigma } => {
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::param(format!("noise sigma must be >= 0, got {sigma}")));
                }
            }
            AugmentationSpec::Transpose { a, b } => {
                if a == b {
                    return Err(Error::param("transpose needs two distinct axes"));
                }
            }
            AugmentationSpec::Flip { axes } => {
                if axes.is_empty() {
                    return Err(Error::param("flip needs at least one axis"));
                }
                let mut seen = [false; 3];
                for ax in axes {
                    let i = ax.dim() - 1;
                    if seen[i] {
                        return Err(Error::param("flip axes must be distinct"));
                    }
                    seen[i] = true;
                }
            }
        }
        Ok(())
    }
}

/// Ordered augmented branches; branch 0 (the identity) is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    /// Per augmented branch: one or two specs applied in order.
    pub branches: Vec<Vec<AugmentationSpec>>,
}

impl AugmentationPlan {
    /// The default plan: identity plus dropout plus noise.
    pub fn dropout_noise() -> Self {
        AugmentationPlan {
            branches: vec![
                vec![AugmentationSpec::RandomDropout { p: DEFAULT_DROPOUT_P }],
                vec![AugmentationSpec::GaussianNoise { sigma: DEFAULT_NOISE_SIGMA }],
            ],
        }
    }

    /// Identity-only plan (no augmented branches).
    pub fn identity_only() -> Self {
        AugmentationPlan { branches: Vec::new() }
    }

    /// Total number of decoded branches, including the identity.
    pub fn num_branches(&self) -> usize {
        self.branches.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (i, specs) in self.branches.iter().enumerate() {
            if specs.len() > 2 {
                return Err(Error::param(format!(
                    "branch {} combines {} augmentations; at most 2 are allowed",
                    i + 1,
                    specs.len()
                )));
            }
            for s in specs {
                s.validate()?;
            }
        }
        Ok(())
    }
}

/// An elementary cell rearrangement on a `[c, Z, Y, X]` tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpatialOp {
    /// Swap two tensor dimensions.
    Swap(usize, usize),
    /// Reverse the listed tensor dimensions.
    Reverse(Vec<usize>),
}

/// A composition of self-inverse spatial ops, applied left to right.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpatialTransform {
    pub ops: Vec<SpatialOp>,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        SpatialTransform::default()
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    /// The inverse composition (each op is its own inverse).
    pub fn inverse(&self) -> Self {
        SpatialTransform { ops: self.ops.iter().rev().cloned().collect() }
    }

    /// Applies the transform to a rank-4 `[c, Z, Y, X]` var.
    pub fn apply<'t>(&self, v: Var<'t>) -> Var<'t> {
        self.ops.iter().fold(v, |h, op| match op {
            SpatialOp::Swap(a, b) => {
                let mut perm: Vec<usize> = (0..4).collect();
                perm.swap(*a, *b);
                h.permute(perm)
            }
            SpatialOp::Reverse(dims) => h.flip(dims.clone()),
        })
    }
}

/// Applies the matching spatial rearrangement to a `[ci, co, kZ, kY, kX]`
/// convolution kernel (spatial dims sit one slot later than on grids).
pub fn transform_kernel(kernel: &Tensor, op: &SpatialOp) -> Tensor {
    let tape = crate::numeric::Tape::new();
    let v = tape.constant(kernel.clone());
    let out = match op {
        SpatialOp::Swap(a, b) => {
            let mut perm: Vec<usize> = (0..5).collect();
            perm.swap(*a + 1, *b + 1);
            v.permute(perm)
        }
        SpatialOp::Reverse(dims) => v.flip(dims.iter().map(|d| d + 1).collect()),
    };
    out.value()
}

/// Applies one augmentation to a `[c, Z, Y, X]` grid.
///
/// Returns the augmented grid and the **inverse** spatial transform to
/// re-align decoded outputs (identity for feature-level specs). Feature
/// noise and dropout draw from `rng` streams keyed by `stream_idx`, so the
/// result is deterministic given the seed.
pub fn apply_augmentation<'t>(
    q: Var<'t>,
    spec: &AugmentationSpec,
    rng: &StreamRng,
    stream_idx: u64,
) -> Result<(Var<'t>, SpatialTransform)> {
    spec.validate()?;
    let shape = q.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("augmentation expects [c, Z, Y, X], got {shape:?}")));
    }
    let tape = q.tape();
    match spec {
        AugmentationSpec::RandomDropout { p } => {
            if *p == 0.0 {
                return Ok((q, SpatialTransform::identity()));
            }
            let u = rng.uniform_tensor("aug.dropout", stream_idx, &shape, 0.0, 1.0);
            let keep = *p;
            let mask = u.map(|v| if v < keep { 0.0 } else { 1.0 });
            Ok((q.mul(tape.constant(mask)), SpatialTransform::identity()))
        }
        AugmentationSpec::GaussianNoise { sigma } => {
            let values = q.value();
            let n = values.numel() as f64;
            let mean = values.data().iter().sum::<f64>() / n;
            let var = values.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let eff = sigma * var.sqrt();
            if eff == 0.0 {
                return Ok((q, SpatialTransform::identity()));
            }
            let noise = rng.normal_tensor("aug.noise", stream_idx, &shape, eff);
            Ok((q.add(tape.constant(noise)), SpatialTransform::identity()))
        }
        AugmentationSpec::Transpose { a, b } => {
            if shape[a.dim()] != shape[b.dim()] {
                return Err(Error::dim(format!(
                    "transpose of unequal extents: {:?} on dims {}/{}",
                    shape,
                    a.dim(),
                    b.dim()
                )));
            }
            let op = SpatialOp::Swap(a.dim(), b.dim());
            let t = SpatialTransform { ops: vec![op] };
            Ok((t.apply(q), t.inverse()))
        }
        AugmentationSpec::Flip { axes } => {
            let t = SpatialTransform {
                ops: vec![SpatialOp::Reverse(axes.iter().map(|a| a.dim()).collect())],
            };
            Ok((t.apply(q), t.inverse()))
        }
    }
}

/// Applies every spec of one branch in order; returns the augmented grid
/// and the composed inverse transform.
pub fn apply_branch<'t>(
    q: Var<'t>,
    specs: &[AugmentationSpec],
    rng: &StreamRng,
    branch: u64,
) -> Result<(Var<'t>, SpatialTransform)> {
    let mut h = q;
    let mut inverse = SpatialTransform::identity();
    for (i, spec) in specs.iter().enumerate() {
        let (next, inv) = apply_augmentation(h, spec, rng, branch * 8 + i as u64)?;
        h = next;
        // Composed inverse: undo later specs first.
        let mut ops = inv.ops;
        ops.extend(inverse.ops);
        inverse = SpatialTransform { ops };
    }
    Ok((h, inverse))
}

// ── Decoder parameters ──

/// One transposed-convolution stage.
#[derive(Debug, Clone)]
pub struct ConvStage {
    /// `[ci, co, kZ, kY, kX]`; kernel extents equal the stride, so each
    /// stage multiplies every spatial extent exactly by its stride.
    pub kernel: Tensor,
    pub stride: (usize, usize, usize),
}

/// Shared upsampler + classifier parameters.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Strided stages followed by one pointwise (stride-1) stage.
    pub stages: Vec<ConvStage>,
    /// Per-cell classifier, `c_last -> L`.
    pub classifier: MlpParams,
    pub num_classes: usize,
}

fn conv_kernel_init(
    ci: usize,
    co: usize,
    k: (usize, usize, usize),
    rng: &StreamRng,
    label: &str,
) -> Tensor {
    let spatial = k.0 * k.1 * k.2;
    let bound = (6.0 / ((ci + co) * spatial) as f64).sqrt();
    rng.uniform_tensor(label, 0, &[ci, co, k.0, k.1, k.2], -bound, bound)
}

impl DecoderParams {
    /// Builds an upsampler from query extents to occupancy extents.
    ///
    /// Per-axis upsampling factors must be powers of two reachable with
    /// `hidden.len()` stride-≤2 stages; channels run `d -> hidden... ->
    /// hidden.last()`, then a pointwise stage and the classifier.
    pub fn init(
        d: usize,
        hidden: &[usize],
        query_extents: [usize; 3],
        out_extents: [usize; 3],
        num_classes: usize,
        rng: &StreamRng,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::param("decoder needs at least one strided stage"));
        }
        if num_classes < 2 {
            return Err(Error::param("decoder needs at least two classes"));
        }
        // Factors in tensor-dim order [Z, Y, X].
        let mut rem = [0usize; 3];
        for (i, (q, o)) in [
            (query_extents[2], out_extents[2]),
            (query_extents[1], out_extents[1]),
            (query_extents[0], out_extents[0]),
        ]
        .iter()
        .enumerate()
        {
            if *q == 0 || o % q != 0 {
                return Err(Error::config(
                    "occupancy_extents",
                    format!("{out_extents:?} is not a multiple of query extents {query_extents:?}"),
                ));
            }
            rem[i] = o / q;
        }
        let mut stages = Vec::new();
        let mut ci = d;
        for (si, &co) in hidden.iter().enumerate() {
            let stride = (
                if rem[0] > 1 { 2 } else { 1 },
                if rem[1] > 1 { 2 } else { 1 },
                if rem[2] > 1 { 2 } else { 1 },
            );
            for (r, s) in rem.iter_mut().zip([stride.0, stride.1, stride.2]) {
                if *r % s != 0 {
                    return Err(Error::config(
                        "occupancy_extents",
                        format!("upsampling factor {r} is not a power of two"),
                    ));
                }
                *r /= s;
            }
            stages.push(ConvStage {
                kernel: conv_kernel_init(ci, co, stride, rng, &format!("decoder.stage{si}")),
                stride,
            });
            ci = co;
        }
        if rem != [1, 1, 1] {
            return Err(Error::config(
                "occupancy_extents",
                format!(
                    "factors {rem:?} remain after {} stride-2 stages; add stages or shrink the gap",
                    hidden.len()
                ),
            ));
        }
        // Channel-preserving pointwise stage.
        stages.push(ConvStage {
            kernel: conv_kernel_init(ci, ci, (1, 1, 1), rng, "decoder.pointwise"),
            stride: (1, 1, 1),
        });
        Ok(DecoderParams {
            stages,
            classifier: MlpParams::init(&[ci, num_classes], &[Activation::Identity], rng, "decoder.classifier"),
            num_classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::param("decoder has no stages"));
        }
        let mut ci = self.stages[0].kernel.shape()[0];
        for (i, st) in self.stages.iter().enumerate() {
            let ks = st.kernel.shape();
            if ks.len() != 5 {
                return Err(Error::dim(format!("stage {i} kernel must be rank 5, got {ks:?}")));
            }
            if ks[0] != ci {
                return Err(Error::dim(format!(
                    "stage {i} expects {ci} input channels, kernel has {}",
                    ks[0]
                )));
            }
            if [ks[2], ks[3], ks[4]] != [st.stride.0, st.stride.1, st.stride.2] {
                return Err(Error::dim(format!(
                    "stage {i}: kernel extents {:?} must equal the stride {:?}",
                    &ks[2..],
                    st.stride
                )));
            }
            ci = ks[1];
        }
        self.classifier.validate()?;
        if self.classifier.in_dim() != ci || self.classifier.out_dim() != self.num_classes {
            return Err(Error::dim(format!(
                "classifier maps {}->{} but stages end at {ci} channels for {} classes",
                self.classifier.in_dim(),
                self.classifier.out_dim(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Visits every parameter tensor; same order as [`BoundDecoder::vars`].
    pub fn for_each_tensor(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, st) in self.stages.iter().enumerate() {
            f(format!("{prefix}.stage.{i}.kernel"), &st.kernel);
        }
        self.classifier.for_each_tensor(&format!("{prefix}.classifier"), f);
    }

    /// Mutable variant of [`Self::for_each_tensor`], same traversal order.
    pub fn for_each_tensor_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            f(format!("{prefix}.stage.{i}.kernel"), &mut st.kernel);
        }
        self.classifier.for_each_tensor_mut(&format!("{prefix}.classifier"), f);
    }

    pub fn bind<'t>(&self, tape: &'t crate::numeric::Tape, trainable: bool) -> BoundDecoder<'t> {
        BoundDecoder {
            stages: self
                .stages
                .iter()
                .map(|st| {
                    let k = if trainable {
                        tape.leaf(st.kernel.clone())
                    } else {
                        tape.constant(st.kernel.clone())
                    };
                    (k, st.stride)
                })
                .collect(),
            classifier: self.classifier.bind(tape, trainable),
            num_classes: self.num_classes,
        }
    }
}

/// Tape-bound decoder parameters.
pub struct BoundDecoder<'t> {
    pub stages: Vec<(Var<'t>, (usize, usize, usize))>,
    pub classifier: BoundMlp<'t>,
    pub num_classes: usize,
}

impl<'t> BoundDecoder<'t> {
    /// All parameter vars; same order as [`DecoderParams::for_each_tensor`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = self.stages.iter().map(|(k, _)| *k).collect();
        out.extend(self.classifier.vars());
        out
    }
}

// ── Decoding ──

/// Reinterprets a cells-major `[cells, d]` grid as spatial `[d, Z, Y, X]`.
pub fn grid_to_spatial<'t>(q: Var<'t>, extents: [usize; 3]) -> Result<Var<'t>> {
    let cells: usize = extents.iter().product();
    let shape = q.shape();
    if shape.len() != 2 || shape[0] != cells {
        return Err(Error::dim(format!(
            "grid shape {shape:?} does not match extents {extents:?} ({cells} cells)"
        )));
    }
    Ok(q
        .transpose2d()
        .reshape(vec![shape[1], extents[2], extents[1], extents[0]]))
}

/// Upsamples one (possibly augmented) branch, re-aligns it with the given
/// inverse transform, and classifies every cell.
///
/// Input `[d, z, y, x]`; output `[cells, L]` class distributions in
/// canonical cell order over `out_extents`.
pub fn decode_branch<'t>(
    q_spatial: Var<'t>,
    inverse: &SpatialTransform,
    dec: &BoundDecoder<'t>,
    out_extents: [usize; 3],
) -> Result<Var<'t>> {
    let mut h = q_spatial;
    for (kernel, stride) in &dec.stages {
        h = h.conv_transpose3d(*kernel, *stride).relu();
    }
    h = inverse.apply(h);
    let shape = h.shape();
    let want = [shape[0], out_extents[2], out_extents[1], out_extents[0]];
    if shape != want {
        return Err(Error::dim(format!(
            "upsampled grid is {shape:?}, target extents {out_extents:?} need {want:?}"
        )));
    }
    let cells: usize = out_extents.iter().product();
    let flat = h.reshape(vec![shape[0], cells]).transpose2d(); // [cells, c]
    Ok(dec.classifier.forward(flat)?.softmax_last(1.0))
}

/// Decodes the identity branch plus every augmented branch of the plan.
///
/// All branches share the decoder parameters; feature augmentations draw
/// from `rng`. Returns `P+1` grids of `[cells, L]` distributions.
pub fn decode_all_branches<'t>(
    q_enc: Var<'t>,
    query_extents: [usize; 3],
    out_extents: [usize; 3],
    plan: &AugmentationPlan,
    dec: &BoundDecoder<'t>,
    rng: &StreamRng,
) -> Result<Vec<Var<'t>>> {
    plan.validate()?;
    let spatial = grid_to_spatial(q_enc, query_extents)?;
    let mut out = Vec::with_capacity(plan.num_branches());
    out.push(decode_branch(spatial, &SpatialTransform::identity(), dec, out_extents)?);
    for (bi, specs) in plan.branches.iter().enumerate() {
        let (aug, inverse) = apply_branch(spatial, specs, rng, bi as u64 + 1)?;
        out.push(decode_branch(aug, &inverse, dec, out_extents)?);
    }
    Ok(out)
}

// ── Sharpening & consistency ──

/// Temperature-sharpens probability rows: `p_c^{1/τ} / Σ_l p_l^{1/τ}` over
/// the trailing axis. Plain-tensor (the sharpened target is detached).
pub fn sharpen(dist: &Tensor, tau_cons: f64) -> Result<Tensor> {
    if !(tau_cons > 0.0) || !tau_cons.is_finite() {
        return Err(Error::param(format!("tau_cons must be positive, got {tau_cons}")));
    }
    let shape = dist.shape().to_vec();
    let l = *shape.last().ok_or_else(|| Error::dim("sharpen needs a trailing class axis"))?;
    if l == 0 {
        return Err(Error::dim("sharpen needs a nonempty class axis"));
    }
    let inv = 1.0 / tau_cons;
    let mut out = dist.data().to_vec();
    for row in out.chunks_mut(l) {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::param("sharpen input must be a probability vector"));
        }
        if tau_cons != 1.0 {
            for v in row.iter_mut() {
                *v = v.powf(inv);
            }
        }
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(Error::param("sharpen input row has no mass"));
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Mean of branch distributions, sharpened and detached: the consistency
/// target `Ṽ`.
pub fn consistency_target(branches: &[Tensor], tau_cons: f64) -> Result<Tensor> {
    let first = branches.first().ok_or_else(|| Error::dim("no branches"))?;
    let mut mean = first.data().to_vec();
    for b in &branches[1..] {
        if b.shape() != first.shape() {
            return Err(Error::dim(format!(
                "branch shapes differ: {:?} vs {:?}",
                b.shape(),
                first.shape()
            )));
        }
        for (m, v) in mean.iter_mut().zip(b.data()) {
            *m += v;
        }
    }
    let inv = 1.0 / branches.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    sharpen(&Tensor::from_parts(first.shape().to_vec(), mean), tau_cons)
}

/// Squared distance of every branch to a fixed target, averaged over cells
/// and branches: `Σ_{p,cell} ‖target_cell − branch_p,cell‖² / (cells·(P+1))`.
pub fn consistency_loss_with_target<'t>(
    branches: &[Var<'t>],
    target: &Tensor,
) -> Result<Var<'t>> {
    let first = branches.first().ok_or_else(|| Error::dim("no branches"))?;
    let shape = first.shape();
    if target.shape() != shape.as_slice() {
        return Err(Error::dim(format!(
            "target shape {:?} does not match branches {shape:?}",
            target.shape()
        )));
    }
    let cells = shape[..shape.len() - 1].iter().product::<usize>().max(1);
    let tape = first.tape();
    let tv = tape.constant(target.clone());
    let mut total: Option<Var<'t>> = None;
    for b in branches {
        if b.shape() != shape {
            return Err(Error::dim(format!(
                "branch shapes differ: {:?} vs {shape:?}",
                b.shape()
            )));
        }
        let diff = tv.sub(*b);
        let sq = diff.mul(diff).sum_all();
        total = Some(match total {
            Some(acc) => acc.add(sq),
            None => sq,
        });
    }
    Ok(total.unwrap().scale(1.0 / (cells * branches.len()) as f64))
}

/// Scene consistency loss: branches against the sharpened detached mean of
/// their own distributions.
pub fn consistency_loss<'t>(branches: &[Var<'t>], tau_cons: f64) -> Result<Var<'t>> {
    let values: Vec<Tensor> = branches.iter().map(|b| b.value()).collect();
    let target = consistency_target(&values, tau_cons)?;
    consistency_loss_with_target(branches, &target)
}

// ── Tests ──
