//! Runtime verification suites behind the `gradcheck` and `oracle-check`
//! subcommands.
//!
//! The gradient suite finite-difference-checks every differentiable
//! operation on randomized small instances; the oracle suite compares the
//! vectorized operations against independent naive-loop references written
//! here with plain indexing.

use crate::clustering::{MaskGenerator, PseudoMaskSet};
use crate::decoder::{consistency_loss, consistency_loss_with_target, consistency_target};
use crate::error::{Error, Result};
use crate::losses::{lovasz_softmax_loss, occupancy_ce_loss};
use crate::numeric::{
    grad_check_multi, Activation, GradCheckReport, MlpParams, StreamRng, Tape, Tensor,
};
use crate::proto_opt::{
    contrastive_loss, map_affinity_to_grid, mask_centroids, prototype_pixel_features,
};
use crate::scene::{FeatureMaps, HitSet, HitSlot};
use crate::view_transform::{
    aggregate, compute_affinity, deformable_cross_attention, dispatch, gather_hit_queries,
    AffinityMatrix, AttentionParams, BoundAttention,
};
use rand::Rng;
use std::time::Instant;

pub const GRADIENT_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;
pub const GRADIENT_INSTANCES: usize = 20;
pub const ORACLE_INSTANCES: usize = 100;

/// Operations covered by the gradient suite.
pub const GRADIENT_OPS: &[&str] = &[
    "aggregate",
    "dispatch",
    "prototype_pixel_features",
    "contrastive_loss",
    "consistency_loss",
    "cross_entropy",
    "lovasz",
    "conv_transpose3d",
    "attention",
];

/// Operations covered by the oracle suite.
pub const ORACLE_OPS: &[&str] = &[
    "aggregate",
    "dispatch",
    "prototype_pixel_features",
    "contrastive_loss",
    "consistency_loss",
    "map_affinity_to_grid",
];

/// Outcome of one operation's run.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub op: String,
    pub instances: usize,
    /// Worst relative (gradient suite) or absolute (oracle suite) error.
    pub max_err: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }
}

fn suite_rng(label: &str, i: u64) -> StreamRng {
    StreamRng::new(29).child(label, i)
}

// ── Shared instance builders ──

/// Random hit slots; `range` bounds the normalized pixel coordinates and at
/// least one slot per view stays valid.
fn random_hits(rng: &StreamRng, n: usize, k: usize, cells: usize, range: (f64, f64)) -> HitSet {
    let mut st = rng.stream("hits", 0);
    let views = (0..n)
        .map(|_| {
            let mut slots: Vec<HitSlot> = (0..k)
                .map(|_| HitSlot {
                    query_index: st.gen_range(0..cells),
                    q_c: [st.gen_range(range.0..range.1), st.gen_range(range.0..range.1)],
                    valid: st.gen_bool(0.8),
                })
                .collect();
            if !slots.iter().any(|s| s.valid) {
                slots[0].valid = true;
            }
            slots
        })
        .collect();
    HitSet { views, k }
}

/// 0/1 slot-validity mask shaped `[n, m, k]`.
fn validity_mask(hits: &HitSet, m: usize) -> Tensor {
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

/// Random mask partition where every id below `s` occurs at least once.
fn random_masks(rng: &StreamRng, n: usize, h: usize, w: usize, s: usize) -> PseudoMaskSet {
    let mut st = rng.stream("masks", 0);
    let cells = h * w;
    assert!(cells >= s);
    let views = (0..n)
        .map(|_| {
            let mut ids: Vec<u32> = (0..cells).map(|_| st.gen_range(0..s) as u32).collect();
            for id in 0..s {
                ids[id] = id as u32;
            }
            ids
        })
        .collect();
    PseudoMaskSet {
        views,
        shape: (h, w),
        num_masks: vec![s; n],
        generator: MaskGenerator::GridKmeans,
    }
}

// ── Naive reference helpers ──

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine with the zero-vector-maps-to-zero convention.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Plain per-row MLP evaluation: `act(W x + b)` per layer.
fn naive_mlp(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for layer in &params.layers {
        let (w, b) = (layer.weight.data(), layer.bias.data());
        let (out_d, in_d) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let mut next = vec![0.0; out_d];
        for o in 0..out_d {
            let mut acc = b[o];
            for i in 0..in_d {
                acc += w[o * in_d + i] * cur[i];
            }
            next[o] = match layer.act {
                Activation::Identity => acc,
                Activation::Relu => acc.max(0.0),
                Activation::Sigmoid => sigmoid(acc),
            };
        }
        cur = next;
    }
    cur
}

fn softmax_rows(raw: &Tensor) -> Vec<f64> {
    let shape = raw.shape();
    let (rows, l) = (shape[0], shape[1]);
    let mut out = vec![0.0; rows * l];
    for r in 0..rows {
        let row = &raw.data()[r * l..(r + 1) * l];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        for (j, &x) in row.iter().enumerate() {
            out[r * l + j] = (x - m).exp() / z;
        }
    }
    out
}

fn max_abs_diff(lib: &Tensor, naive: &[f64]) -> f64 {
    lib.data()
        .iter()
        .zip(naive)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

// ── Gradient suite instances ──

fn grad_aggregate(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.aggregate", i);
    let mut st = rng.stream("dims", 0);
    let (n, m, k, d) = (
        st.gen_range(1..=2),
        st.gen_range(1..=3),
        st.gen_range(2..=4),
        st.gen_range(2..=3),
    );
    let hits = random_hits(&rng, n, k, k, (0.05, 0.95));
    let p = rng.normal_tensor("p", 0, &[n, m, d], 0.7);
    let q = rng.normal_tensor("q", 0, &[n, k, d], 0.7);
    grad_check_multi(
        |_, xs| {
            let a = compute_affinity(xs[0], xs[1], &hits).expect("affinity");
            aggregate(xs[0], xs[1], &a, 1e-6).expect("aggregate").sum_all()
        },
        &[p, q],
        1e-5,
    )
}

fn grad_dispatch(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.dispatch", i);
    let mut st = rng.stream("dims", 0);
    let (n, m, k, d) = (
        st.gen_range(1..=2),
        st.gen_range(1..=3),
        st.gen_range(2..=4),
        st.gen_range(2..=3),
    );
    let hits = random_hits(&rng, n, k, k, (0.05, 0.95));
    let p = rng.normal_tensor("p", 0, &[n, m, d], 0.7);
    let q = rng.normal_tensor("q", 0, &[n, k, d], 0.7);
    // Smooth hidden activation keeps the check away from kinks.
    let mlp = MlpParams::init(&[d, d + 1, d], &[Activation::Sigmoid, Activation::Identity], &rng, "mlp");
    grad_check_multi(
        |t, xs| {
            let a = compute_affinity(xs[0], xs[1], &hits).expect("affinity");
            let pv = aggregate(xs[0], xs[1], &a, 1e-6).expect("aggregate");
            dispatch(xs[1], &a, pv, &mlp.bind(t, false), &hits).expect("dispatch").sum_all()
        },
        &[p, q],
        1e-5,
    )
}

fn grad_prototype_pixel_features(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.ppf", i);
    let mut st = rng.stream("dims", 0);
    let (n, m, d, dd) = (
        st.gen_range(1..=2),
        st.gen_range(1..=3),
        st.gen_range(2..=3),
        st.gen_range(2..=5),
    );
    let g = rng.uniform_tensor("g", 0, &[n, dd], 0.0, 1.5);
    let ha = rng.normal_tensor("ha", 0, &[n, m, dd], 0.8);
    let pv = rng.normal_tensor("pv", 0, &[n, m, d], 0.8);
    let r = rng.normal_tensor("r", 0, &[n, d, dd], 1.0);
    grad_check_multi(
        |t, xs| {
            prototype_pixel_features(xs[0], xs[1], xs[2])
                .expect("features")
                .mul(t.constant(r.clone()))
                .sum_all()
        },
        &[g, ha, pv],
        1e-5,
    )
}

fn grad_contrastive(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.contrastive", i);
    let mut st = rng.stream("dims", 0);
    let (n, d, h, w) = (
        st.gen_range(1..=2),
        st.gen_range(2..=3),
        2,
        st.gen_range(2..=3),
    );
    let s = st.gen_range(1..=3.min(h * w));
    let masks = random_masks(&rng, n, h, w, s);
    let x = rng.normal_tensor("x", 0, &[n, d, h * w], 0.8);
    grad_check_multi(
        |_, xs| {
            let cents = mask_centroids(xs[0], &masks).expect("centroids");
            contrastive_loss(xs[0], &cents, &masks, 0.3).expect("contrastive")
        },
        &[x],
        1e-5,
    )
}

fn grad_consistency(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.consistency", i);
    let mut st = rng.stream("dims", 0);
    let (cells, l, branches) = (st.gen_range(2..=4), st.gen_range(2..=3), st.gen_range(2..=3));
    let tau = [0.3, 0.5, 1.0][(i % 3) as usize];
    let raws: Vec<Tensor> = (0..branches)
        .map(|b| rng.normal_tensor("b", b as u64, &[cells, l], 1.0))
        .collect();
    // The sharpened target is detached, so the check fixes it at the
    // linearization point and differentiates only the branch distances.
    let values: Vec<Tensor> = raws
        .iter()
        .map(|r| {
            let t = Tape::new();
            t.constant(r.clone()).softmax_last(1.0).value()
        })
        .collect();
    let target = consistency_target(&values, tau)?;
    grad_check_multi(
        |_, xs| {
            let bs: Vec<_> = xs.iter().map(|x| x.softmax_last(1.0)).collect();
            consistency_loss_with_target(&bs, &target).expect("consistency")
        },
        &raws,
        1e-5,
    )
}

fn grad_cross_entropy(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.ce", i);
    let mut st = rng.stream("dims", 0);
    let (cells, l) = (st.gen_range(2..=5), st.gen_range(2..=4));
    let gt: Vec<u32> = (0..cells).map(|_| st.gen_range(0..l) as u32).collect();
    let weights: Option<Vec<f64>> =
        (i % 2 == 1).then(|| (0..l).map(|_| st.gen_range(0.5..1.5)).collect());
    let raw = rng.normal_tensor("x", 0, &[cells, l], 1.0);
    grad_check_multi(
        |_, xs| {
            occupancy_ce_loss(xs[0].softmax_last(1.0), &gt, weights.as_deref()).expect("ce")
        },
        &[raw],
        1e-5,
    )
}

/// Rejects Lovász instances whose sorted per-class errors sit close enough
/// to a tie (or to zero) that a finite-difference step could reorder them.
fn lovasz_stable(raw: &Tensor, gt: &[u32], l: usize) -> bool {
    let p = softmax_rows(raw);
    let cells = gt.len();
    let mut present: Vec<u32> = gt.to_vec();
    present.sort_unstable();
    present.dedup();
    for &c in &present {
        let mut errs: Vec<f64> = (0..cells)
            .map(|i| {
                let fg = f64::from(gt[i] == c);
                (fg - p[i * l + c as usize]).abs()
            })
            .collect();
        if errs.iter().any(|&e| e < 1e-4) {
            return false;
        }
        errs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if errs.windows(2).any(|w| (w[0] - w[1]).abs() < 1e-4) {
            return false;
        }
    }
    true
}

fn grad_lovasz(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.lovasz", i);
    let mut st = rng.stream("dims", 0);
    let (cells, l) = (st.gen_range(3..=6), st.gen_range(2..=4));
    for attempt in 0..64 {
        let raw = rng.normal_tensor("x", attempt, &[cells, l], 1.2);
        let mut gs = rng.stream("gt", attempt);
        let gt: Vec<u32> = (0..cells).map(|_| gs.gen_range(0..l) as u32).collect();
        if !lovasz_stable(&raw, &gt, l) {
            continue;
        }
        return grad_check_multi(
            |_, xs| lovasz_softmax_loss(xs[0].softmax_last(1.0), &gt).expect("lovasz"),
            &[raw],
            1e-5,
        );
    }
    Err(Error::generation("no tie-free Lovász instance found"))
}

fn grad_conv_transpose3d(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.conv", i);
    let mut st = rng.stream("dims", 0);
    let (ci, co) = (st.gen_range(1..=2), st.gen_range(1..=2));
    let din: [usize; 3] = [st.gen_range(1..=3), st.gen_range(1..=2), st.gen_range(1..=3)];
    let kd: [usize; 3] = [st.gen_range(1..=2), st.gen_range(1..=2), st.gen_range(1..=2)];
    let stride = (st.gen_range(1..=2), st.gen_range(1..=2), st.gen_range(1..=2));
    let x = rng.normal_tensor("x", 0, &[ci, din[0], din[1], din[2]], 0.8);
    let kernel = rng.normal_tensor("k", 0, &[ci, co, kd[0], kd[1], kd[2]], 0.8);
    let dout: Vec<usize> = (0..3)
        .map(|a| (din[a] - 1) * [stride.0, stride.1, stride.2][a] + kd[a])
        .collect();
    let r = rng.normal_tensor("r", 0, &[co, dout[0], dout[1], dout[2]], 1.0);
    grad_check_multi(
        |t, xs| xs[0].conv_transpose3d(xs[1], stride).mul(t.constant(r.clone())).sum_all(),
        &[x, kernel],
        1e-5,
    )
}

fn grad_attention(i: u64) -> Result<GradCheckReport> {
    let rng = suite_rng("grad.attention", i);
    let mut st = rng.stream("dims", 0);
    let (cells, d, points) = (st.gen_range(3..=4), st.gen_range(2..=3), st.gen_range(1..=2));
    let fmaps = FeatureMaps {
        views: vec![rng.normal_tensor("f", 0, &[d, 5, 7], 0.5)],
        feat_h: 5,
        feat_w: 7,
        d,
    };
    // Interior reference points keep bilinear sampling away from kinks.
    let hits = random_hits(&rng, 1, 4, cells, (0.15, 0.85));
    let mut params = AttentionParams::init(d, points, &rng, "attn");
    // Small nonzero offsets exercise the coordinate gradient while staying
    // near the kink-free reference points.
    params.offset.layers[0].weight = rng.normal_tensor("offw", 0, &[2 * points, d], 0.005);
    let grid = rng.normal_tensor("grid", 0, &[cells, d], 0.6);
    grad_check_multi(
        |t, xs| {
            let bound = BoundAttention {
                offset: params.offset.bind(t, false),
                weight: params.weight.bind(t, false),
                out_proj: params.out_proj.bind(t, false),
                n_points: points,
            };
            let q = gather_hit_queries(xs[0], &hits).expect("gather");
            let (enc, g) = deformable_cross_attention(xs[0], q, &fmaps, &hits, (3, 3), &bound)
                .expect("attention");
            enc.sum_all().add(g.sum_all())
        },
        &[grid],
        1e-5,
    )
}

// ── Oracle suite instances ──

fn oracle_dims(st: &mut impl Rng) -> (usize, usize, usize, usize) {
    (
        st.gen_range(1..=2),
        st.gen_range(1..=4),
        st.gen_range(1..=8),
        st.gen_range(1..=4),
    )
}

fn oracle_aggregate(i: u64) -> Result<f64> {
    let rng = suite_rng("oracle.aggregate", i);
    let mut st = rng.stream("dims", 0);
    let (n, m, k, d) = oracle_dims(&mut st);
    let hits = random_hits(&rng, n, k, k, (0.05, 0.95));
    let raw = rng.normal_tensor("a", 0, &[n, m, k], 1.0);
    let p = rng.normal_tensor("p", 0, &[n, m, d], 0.8);
    let q = rng.normal_tensor("q", 0, &[n, k, d], 0.8);
    let mask = validity_mask(&hits, m);
    let eps = 1e-6;

    let tape = Tape::new();
    let a = AffinityMatrix { raw: tape.constant(raw.clone()), mask: mask.clone() };
    let lib = aggregate(tape.constant(p.clone()), tape.constant(q.clone()), &a, eps)?.value();

    let (rd, pd, qd, md) = (raw.data(), p.data(), q.data(), mask.data());
    let mut out = vec![0.0; n * m * d];
    for vi in 0..n {
        for mi in 0..m {
            let mut r = eps;
            let mut acc = vec![0.0; d];
            for ki in 0..k {
                let idx = (vi * m + mi) * k + ki;
                let s = sigmoid(rd[idx]) * md[idx];
                r += s;
                for c in 0..d {
                    acc[c] += s * qd[(vi * k + ki) * d + c];
                }
            }
            for c in 0..d {
                let o = (vi * m + mi) * d + c;
                out[o] = (pd[o] + acc[c]) / r;
            }
        }
    }
    Ok(max_abs_diff(&lib, &out))
}

fn oracle_dispatch(i: u64) -> Result<f64> {
    let rng = suite_rng("oracle.dispatch", i);
    let mut st = rng.stream("dims", 0);
    let (n, m, k, d) = oracle_dims(&mut st);
    let hits = random_hits(&rng, n, k, k, (0.05, 0.95));
    let raw = rng.normal_tensor("a", 0, &[n, m, k], 1.0);
    let q = rng.normal_tensor("q", 0, &[n, k, d], 0.8);
    let pv = rng.normal_tensor("pv", 0, &[n, m, d], 0.8);
    let mask = validity_mask(&hits, m);
    let mut mlp = MlpParams::init(&[d, d + 1, d], &[Activation::Sigmoid, Activation::Identity], &rng, "mlp");
    for (li, layer) in mlp.layers.iter_mut().enumerate() {
        layer.bias = rng.normal_tensor("bias", li as u64, layer.bias.shape(), 0.3);
    }

    let tape = Tape::new();
    let a = AffinityMatrix { raw: tape.constant(raw.clone()), mask: mask.clone() };
    let lib = dispatch(
        tape.constant(q.clone()),
        &a,
        tape.constant(pv.clone()),
        &mlp.bind(&tape, false),
        &hits,
    )?
    .value();

    let (rd, qd, pd, md) = (raw.data(), q.data(), pv.data(), mask.data());
    let mut out = vec![0.0; n * k * d];
    for vi in 0..n {
        for ki in 0..k {
            let mut msg = vec![0.0; d];
            for mi in 0..m {
                let idx = (vi * m + mi) * k + ki;
                let s = sigmoid(rd[idx]) * md[idx];
                for c in 0..d {
                    msg[c] += s * pd[(vi * m + mi) * d + c];
                }
            }
            let delta = naive_mlp(&mlp, &msg);
            let valid = hits.views[vi][ki].valid;
            for c in 0..d {
                let o = (vi * k + ki) * d + c;
                out[o] = qd[o] + if valid { delta[c] } else { 0.0 };
            }
        }
    }
    Ok(max_abs_diff(&lib, &out))
}

fn oracle_prototype_pixel_features(i: u64) -> Result<f64> {
    let rng = suite_rng("oracle.ppf", i);
    let mut st = rng.stream("dims", 0);
    let (n, m, _, d) = oracle_dims(&mut st);
    let dd = st.gen_range(1..=8);
    let g = rng.uniform_tensor("g", 0, &[n, dd], 0.0, 1.5);
    let ha = rng.normal_tensor("ha", 0, &[n, m, dd], 0.8);
    let pv = rng.normal_tensor("pv", 0, &[n, m, d], 0.8);

    let tape = Tape::new();
    let lib = prototype_pixel_features(
        tape.constant(g.clone()),
        tape.constant(ha.clone()),
        tape.constant(pv.clone()),
    )?
    .value();

    let (gd, hd, pd) = (g.data(), ha.data(), pv.data());
    let mut out = vec![0.0; n * d * dd];
    for vi in 0..n {
        for c in 0..d {
            for p in 0..dd {
                let mut acc = 0.0;
                for mi in 0..m {
                    acc += gd[vi * dd + p]
                        * hd[(vi * m + mi) * dd + p]
                        * pd[(vi * m + mi) * d + c];
                }
                out[(vi * d + c) * dd + p] = acc;
            }
        }
    }
    Ok(max_abs_diff(&lib, &out))
}

fn oracle_contrastive(i: u64) -> Result<f64> {
    let rng = suite_rng("oracle.contrastive", i);
    let mut st = rng.stream("dims", 0);
    let (n, d) = (st.gen_range(1..=2), st.gen_range(1..=4));
    let (h, w) = (2, st.gen_range(2..=4));
    let s = st.gen_range(1..=4.min(h * w));
    let tau = st.gen_range(0.2..1.0);
    let masks = random_masks(&rng, n, h, w, s);
    let x = rng.normal_tensor("x", 0, &[n, d, h * w], 0.8);

    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let cents = mask_centroids(xv, &masks)?;
    let lib = contrastive_loss(xv, &cents, &masks, tau)?.value().data()[0];

    let xd = x.data();
    let cells = h * w;
    let mut total = 0.0;
    for vi in 0..n {
        // Centroids: mean feature of each mask's cells.
        let mut cent = vec![0.0; s * d];
        let mut count = vec![0usize; s];
        for cell in 0..cells {
            let id = masks.views[vi][cell] as usize;
            count[id] += 1;
            for c in 0..d {
                cent[id * d + c] += xd[(vi * d + c) * cells + cell];
            }
        }
        for id in 0..s {
            for c in 0..d {
                cent[id * d + c] /= count[id] as f64;
            }
        }
        for cell in 0..cells {
            let own = masks.views[vi][cell] as usize;
            let pix: Vec<f64> = (0..d).map(|c| xd[(vi * d + c) * cells + cell]).collect();
            let logits: Vec<f64> =
                (0..s).map(|id| cosine(&pix, &cent[id * d..(id + 1) * d]) / tau).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - logits[own];
        }
    }
    Ok((lib - total).abs())
}

fn oracle_consistency(i: u64) -> Result<f64> {
    let rng = suite_rng("oracle.consistency", i);
    let mut st = rng.stream("dims", 0);
    let (cells, l, branches) = (st.gen_range(1..=8), st.gen_range(2..=4), st.gen_range(1..=4));
    let tau = [0.3, 0.5, 1.0][(i % 3) as usize];
    let raws: Vec<Tensor> = (0..branches)
        .map(|b| rng.normal_tensor("b", b as u64, &[cells, l], 1.0))
        .collect();
    let dists: Vec<Vec<f64>> = raws.iter().map(softmax_rows).collect();

    let tape = Tape::new();
    let vars: Vec<_> = dists
        .iter()
        .map(|d| tape.constant(Tensor::from_parts(vec![cells, l], d.clone())))
        .collect();
    let lib = consistency_loss(&vars, tau)?.value().data()[0];

    // Mean over branches, sharpened, then mean squared distance.
    let mut mean = vec![0.0; cells * l];
    for d in &dists {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / branches as f64;
        }
    }
    let mut target = vec![0.0; cells * l];
    for r in 0..cells {
        let row = &mean[r * l..(r + 1) * l];
        let powed: Vec<f64> = row.iter().map(|&v| v.powf(1.0 / tau)).collect();
        let z: f64 = powed.iter().sum();
        for (j, &v) in powed.iter().enumerate() {
            target[r * l + j] = v / z;
        }
    }
    let mut total = 0.0;
    for d in &dists {
        for (t, v) in target.iter().zip(d) {
            total += (t - v) * (t - v);
        }
    }
    total /= (cells * branches) as f64;
    Ok((lib - total).abs())
}

fn oracle_map_affinity(i: u64) -> Result<f64> {
    let rng = suite_rng("oracle.map", i);
    let mut st = rng.stream("dims", 0);
    let (n, m, k, _) = oracle_dims(&mut st);
    let (gh, gw) = (st.gen_range(1..=3), st.gen_range(1..=3));
    // Coordinates occasionally past 1 exercise the out-of-range drop.
    let hits = random_hits(&rng, n, k, k, (0.0, 1.05));
    let raw = rng.normal_tensor("a", 0, &[n, m, k], 1.0);
    let mask = validity_mask(&hits, m);

    let tape = Tape::new();
    let a = AffinityMatrix { raw: tape.constant(raw.clone()), mask };
    let lib = map_affinity_to_grid(&a, &hits, (gh, gw))?.value();

    let rd = raw.data();
    let mut out = vec![0.0; n * m * gh * gw];
    for vi in 0..n {
        for (ki, slot) in hits.views[vi].iter().enumerate() {
            if !slot.valid {
                continue;
            }
            let (px, py) = ((slot.q_c[0] * gw as f64).floor(), (slot.q_c[1] * gh as f64).floor());
            if px < 0.0 || py < 0.0 || px >= gw as f64 || py >= gh as f64 {
                continue;
            }
            let cell = py as usize * gw + px as usize;
            for mi in 0..m {
                out[(vi * m + mi) * (gh * gw) + cell] += rd[(vi * m + mi) * k + ki];
            }
        }
    }
    Ok(max_abs_diff(&lib, &out))
}

// ── Suite runners ──

fn run_suite<F>(
    table: &[(&str, F)],
    filter: Option<&str>,
    instances: usize,
    tolerance: f64,
    available: &[&str],
    errs: impl Fn(&F, u64) -> Result<f64>,
) -> Result<Vec<SuiteReport>> {
    if let Some(op) = filter {
        if !available.contains(&op) {
            return Err(Error::param(format!(
                "unknown operation `{op}`; available: {}",
                available.join(", ")
            )));
        }
    }
    let mut out = Vec::new();
    for (name, f) in table {
        if filter.is_some_and(|op| op != *name) {
            continue;
        }
        let started = Instant::now();
        let mut max_err = 0.0f64;
        for i in 0..instances {
            max_err = max_err.max(errs(f, i as u64)?);
        }
        out.push(SuiteReport {
            op: name.to_string(),
            instances,
            max_err,
            tolerance,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

/// Finite-difference checks for every differentiable operation.
pub fn gradient_suite(filter: Option<&str>) -> Result<Vec<SuiteReport>> {
    type F = fn(u64) -> Result<GradCheckReport>;
    let table: [(&str, F); 9] = [
        ("aggregate", grad_aggregate),
        ("dispatch", grad_dispatch),
        ("prototype_pixel_features", grad_prototype_pixel_features),
        ("contrastive_loss", grad_contrastive),
        ("consistency_loss", grad_consistency),
        ("cross_entropy", grad_cross_entropy),
        ("lovasz", grad_lovasz),
        ("conv_transpose3d", grad_conv_transpose3d),
        ("attention", grad_attention),
    ];
    run_suite(&table, filter, GRADIENT_INSTANCES, GRADIENT_TOL, GRADIENT_OPS, |f, i| {
        Ok(f(i)?.max_rel_err)
    })
}

/// Naive-loop reference comparisons for the vectorized operations.
pub fn oracle_suite(filter: Option<&str>) -> Result<Vec<SuiteReport>> {
    type F = fn(u64) -> Result<f64>;
    let table: [(&str, F); 6] = [
        ("aggregate", oracle_aggregate),
        ("dispatch", oracle_dispatch),
        ("prototype_pixel_features", oracle_prototype_pixel_features),
        ("contrastive_loss", oracle_contrastive),
        ("consistency_loss", oracle_consistency),
        ("map_affinity_to_grid", oracle_map_affinity),
    ];
    run_suite(&table, filter, ORACLE_INSTANCES, ORACLE_TOL, ORACLE_OPS, |f, i| f(i))
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filtered_gradient_suite_passes() {
        for op in ["aggregate", "consistency_loss", "lovasz"] {
            let reports = gradient_suite(Some(op)).unwrap();
            assert_eq!(reports.len(), 1);
            assert!(reports[0].passed(), "{op}: {:?}", reports[0]);
            assert_eq!(reports[0].instances, GRADIENT_INSTANCES);
        }
    }

    #[test]
    fn filtered_oracle_suite_passes() {
        for op in ["aggregate", "contrastive_loss", "map_affinity_to_grid"] {
            let reports = oracle_suite(Some(op)).unwrap();
            assert_eq!(reports.len(), 1);
            assert!(reports[0].passed(), "{op}: {:?}", reports[0]);
            assert_eq!(reports[0].instances, ORACLE_INSTANCES);
        }
    }

    #[test]
    fn unknown_operation_is_rejected() {
        let err = gradient_suite(Some("nope")).unwrap_err();
        assert!(err.to_string().contains("available"));
        assert!(oracle_suite(Some("nope")).is_err());
    }
}
