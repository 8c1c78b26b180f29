//! Occupancy losses and IoU metrics.
//!
//! The training objective combines, per decoded branch, a per-cell
//! cross-entropy and a Lovász-softmax surrogate of mean IoU, plus the two
//! scene-level regularisers computed elsewhere (the prototype contrastive
//! loss and the cross-branch consistency loss):
//!
//! `total = Σ_p (λ1·ce_p + λ2·lovasz_p) + λ3·contrastive + λ4·consistency`.

use crate::error::{Error, Result};
use crate::numeric::{Tensor, Var};
use serde::{Deserialize, Serialize};

// ── Loss weights ──

/// Coefficients of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Per-branch cross-entropy weight.
    pub lambda1: f64,
    /// Per-branch Lovász-softmax weight.
    pub lambda2: f64,
    /// Prototype contrastive weight.
    pub lambda3: f64,
    /// Cross-branch consistency weight.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 10.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("must be a nonnegative float, got {v}")));
            }
        }
        Ok(())
    }
}

// ── Cross-entropy ──

fn check_labels(gt: &[u32], num_classes: usize, cells: usize) -> Result<()> {
    if gt.len() != cells {
        return Err(Error::dim(format!("{} labels for {} cells", gt.len(), cells)));
    }
    if let Some(bad) = gt.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::data(format!("label {bad} out of range for {num_classes} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class over all cells.
///
/// `pred` holds `[cells, L]` class distributions; `class_weights` (length
/// `L`, nonnegative) turns the mean into a weighted mean over cells,
/// normalised by the total weight.
pub fn occupancy_ce_loss<'t>(
    pred: Var<'t>,
    gt: &[u32],
    class_weights: Option<&[f64]>,
) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("predictions must be [cells, L], got {shape:?}")));
    }
    let (cells, l) = (shape[0], shape[1]);
    check_labels(gt, l, cells)?;
    let idx: Vec<usize> = gt.iter().map(|&g| g as usize).collect();
    let nll = pred.gather_last(idx).ln().neg(); // [cells]
    match class_weights {
        None => Ok(nll.sum_all().scale(1.0 / cells as f64)),
        Some(w) => {
            if w.len() != l {
                return Err(Error::dim(format!("{} class weights for {l} classes", w.len())));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::param("class weights must be nonnegative"));
            }
            let per_cell: Vec<f64> = gt.iter().map(|&g| w[g as usize]).collect();
            let total: f64 = per_cell.iter().sum();
            if total <= 0.0 {
                return Err(Error::param("class weights give zero total weight"));
            }
            let wv = pred.tape().constant(Tensor::from_parts(vec![cells], per_cell));
            Ok(nll.mul(wv).sum_all().scale(1.0 / total))
        }
    }
}

// ── Lovász-softmax ──

/// Jaccard-extension weights for errors sorted descending, given the
/// equally sorted foreground indicators.
fn lovasz_grad(fg_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = fg_sorted.iter().sum();
    let mut inter = gts;
    let mut union = gts;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&fg| {
            inter -= fg;
            union += 1.0 - fg;
            let jaccard = 1.0 - inter / union;
            let g = jaccard - prev;
            prev = jaccard;
            g
        })
        .collect()
}

/// Lovász extension of the per-class Jaccard loss on softmax probabilities,
/// averaged over the classes present in `gt`.
///
/// Per class: errors are `1 − p` on its cells and `p` elsewhere, sorted
/// descending and weighted by the Jaccard-extension gradient. The sort
/// order and weights are treated as constants of the linearisation point;
/// gradients flow through the error values.
pub fn lovasz_softmax_loss<'t>(pred: Var<'t>, gt: &[u32]) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!("predictions must be [cells, L], got {shape:?}")));
    }
    let (cells, l) = (shape[0], shape[1]);
    check_labels(gt, l, cells)?;
    let mut present: Vec<usize> = gt.iter().map(|&g| g as usize).collect();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return Err(Error::dim("empty label grid"));
    }
    let tape = pred.tape();
    let by_class = pred.transpose2d(); // [L, cells]
    let mut total: Option<Var<'t>> = None;
    for &c in &present {
        let fg: Vec<f64> = gt.iter().map(|&g| if g as usize == c { 1.0 } else { 0.0 }).collect();
        let sign: Vec<f64> = fg.iter().map(|&f| if f == 1.0 { 1.0 } else { -1.0 }).collect();
        // |fg − p| without a branch: (fg − p)·sign, exact for p ∈ [0,1].
        let errors = tape
            .constant(Tensor::from_parts(vec![cells], fg.clone()))
            .sub(by_class.index_axis0(c))
            .mul(tape.constant(Tensor::from_parts(vec![cells], sign)));
        let mut order: Vec<usize> = (0..cells).collect();
        let vals = errors.value();
        order.sort_by(|&a, &b| vals.data()[b].partial_cmp(&vals.data()[a]).unwrap());
        let fg_sorted: Vec<f64> = order.iter().map(|&i| fg[i]).collect();
        let weights = lovasz_grad(&fg_sorted);
        let sorted = errors.reshape(vec![cells, 1]).gather_rows(order).reshape(vec![cells]);
        let loss_c = sorted.mul(tape.constant(Tensor::from_parts(vec![cells], weights))).sum_all();
        total = Some(match total {
            Some(acc) => acc.add(loss_c),
            None => loss_c,
        });
    }
    Ok(total.unwrap().scale(1.0 / present.len() as f64))
}

// ── Combined objective ──

/// Weighted sum of per-branch losses and the two scene-level terms:
/// `Σ_p (λ1·occ_p + λ2·lov_p) + λ3·cls + λ4·cons`.
pub fn total_loss<'t>(
    branch_losses: &[(Var<'t>, Var<'t>)],
    l_cls: Var<'t>,
    l_cons: Var<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    weights.validate()?;
    if branch_losses.is_empty() {
        return Err(Error::dim("no branch losses"));
    }
    let mut total = l_cls.scale(weights.lambda3).add(l_cons.scale(weights.lambda4));
    for (occ, lov) in branch_losses {
        total = total.add(occ.scale(weights.lambda1)).add(lov.scale(weights.lambda2));
    }
    Ok(total)
}

// ── Metrics ──

/// Per-class intersection-over-union and its mean.
///
/// Classes absent from both prediction and ground truth get `None` and are
/// excluded from the mean; `ignore_free` additionally excludes class 0.
/// The mean is `None` when no class remains.
pub fn miou(
    pred_labels: &[u32],
    gt_labels: &[u32],
    num_classes: usize,
    ignore_free: bool,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    if pred_labels.len() != gt_labels.len() {
        return Err(Error::dim(format!(
            "{} predicted labels vs {} ground-truth labels",
            pred_labels.len(),
            gt_labels.len()
        )));
    }
    check_labels(pred_labels, num_classes, pred_labels.len())?;
    check_labels(gt_labels, num_classes, gt_labels.len())?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred_labels.iter().zip(gt_labels) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { None } else { Some(i as f64 / u as f64) })
        .collect();
    let start = usize::from(ignore_free);
    let counted: Vec<f64> = per_class[start..].iter().flatten().copied().collect();
    let mean = if counted.is_empty() {
        None
    } else {
        Some(counted.iter().sum::<f64>() / counted.len() as f64)
    };
    Ok((per_class, mean))
}

/// Argmax class per cell of a `[cells, L]` distribution grid.
pub fn argmax_labels(pred: &Tensor) -> Result<Vec<u32>> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::dim(format!("predictions must be [cells, L], got {shape:?}")));
    }
    Ok(pred
        .data()
        .chunks(shape[1])
        .map(|row| {
            // Ties resolve to the lowest class index.
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

// ── Tests ──
