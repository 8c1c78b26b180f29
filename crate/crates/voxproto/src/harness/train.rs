//! Training loop, evaluation, the AdamW optimizer, and the metrics log.

use super::{BoundModel, Dataset, ExperimentConfig, ModelParams, PreparedScene};
use crate::decoder::{consistency_loss, decode_all_branches, AugmentationPlan};
use crate::error::{Error, Result};
use crate::losses::{argmax_labels, lovasz_softmax_loss, miou, occupancy_ce_loss, total_loss};
use crate::numeric::{StreamRng, Tape, Tensor, Var};
use crate::proto_opt::{
    contrastive_loss, map_affinity_to_grid, mask_centroids, prototype_pixel_features,
};
use crate::view_transform::encode;
use serde::{Deserialize, Serialize};
use std::time::Instant;

// ── Optimizer ──

/// Learning-rate schedule over the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from 1 to `min_frac` of the base rate.
    Cosine { min_frac: f64 },
}

impl Schedule {
    /// Multiplier applied to the base rate at `step` of `total_steps`.
    pub fn factor(&self, step: usize, total_steps: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { min_frac } => {
                if total_steps <= 1 {
                    return 1.0;
                }
                let x = step as f64 / (total_steps - 1) as f64;
                min_frac + (1.0 - min_frac) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Schedule::Cosine { min_frac } = self {
            if !(0.0..=1.0).contains(min_frac) {
                return Err(Error::config("optimizer.schedule", "min_frac must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// AdamW settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("optimizer.lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("optimizer.weight_decay", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        self.schedule.validate()
    }
}

/// Decoupled-weight-decay Adam over the model's tensors, updated in place
/// in [`ModelParams`] traversal order.
pub(crate) struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: OptimizerConfig) -> Result<AdamW> {
        cfg.validate()?;
        let mut m = Vec::new();
        params.for_each_tensor(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        Ok(AdamW { cfg, v: m.clone(), m, t: 0 })
    }

    /// One update with gradients in traversal order; `lr_scale` is the
    /// schedule factor for this step.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr_scale: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.lr * lr_scale;
        let (wd, eps) = (self.cfg.weight_decay, self.cfg.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        let mut bad: Option<Error> = None;
        params.for_each_tensor_mut(&mut |name, p| {
            if bad.is_some() {
                return;
            }
            if grads[i].shape() != p.shape() {
                bad = Some(Error::dim(format!(
                    "gradient shape {:?} does not match `{name}` {:?}",
                    grads[i].shape(),
                    p.shape()
                )));
                return;
            }
            let gd = grads[i].data();
            let md = ms[i].data_mut();
            let vd = vs[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = gd[j];
                md[j] = b1 * md[j] + (1.0 - b1) * g;
                vd[j] = b2 * vd[j] + (1.0 - b2) * g * g;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[j]);
            }
            i += 1;
        });
        match bad {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ── Forward pass ──

/// One scene's differentiable outputs plus the component values.
pub(crate) struct ForwardPass<'t> {
    /// `P+1` decoded `[cells, L]` distributions; branch 0 is unaugmented.
    pub branches: Vec<Var<'t>>,
    pub total: Var<'t>,
    pub total_value: f64,
    /// Branch-averaged cross-entropy / Lovász values.
    pub ce: f64,
    pub lovasz: f64,
    pub contrastive: f64,
    pub consistency: f64,
}

fn finite_scalar(name: &str, v: Var<'_>) -> Result<f64> {
    let x = v.value().data()[0];
    if !x.is_finite() {
        return Err(Error::data(format!("{name} is not finite ({x})")));
    }
    Ok(x)
}

/// Encode, decode all branches, and assemble every loss term for one scene.
///
/// The contrastive term is a constant zero when prototypes are disabled or
/// prototype optimization is off; the consistency term is a constant zero
/// for a single-branch plan.
pub(crate) fn forward_scene<'t>(
    bound: &BoundModel<'t>,
    config: &ExperimentConfig,
    plan: &AugmentationPlan,
    scene: &PreparedScene,
    rng: &StreamRng,
) -> Result<ForwardPass<'t>> {
    let enc_cfg = config.encode_config();
    let enc = encode(
        bound.queries,
        config.model.query_extents,
        &scene.hits,
        &scene.fmaps,
        &scene.protos,
        &bound.encoder,
        &enc_cfg,
    )?;
    let branches = decode_all_branches(
        enc.q_enc,
        config.model.query_extents,
        config.scene.grid,
        plan,
        &bound.decoder,
        rng,
    )?;
    let mut branch_losses = Vec::with_capacity(branches.len());
    let (mut ce_sum, mut lov_sum) = (0.0, 0.0);
    for (p, b) in branches.iter().enumerate() {
        let occ = occupancy_ce_loss(*b, &scene.labels, None)?;
        let lov = lovasz_softmax_loss(*b, &scene.labels)?;
        ce_sum += finite_scalar(&format!("branch {p} cross-entropy"), occ)?;
        lov_sum += finite_scalar(&format!("branch {p} Lovász loss"), lov)?;
        branch_losses.push((occ, lov));
    }
    let tape = bound.queries.tape();
    let l_cls = match (&enc.affinity, enc.p_vox) {
        (Some(aff), Some(p_vox)) if config.model.prototype_optimization => {
            let ha = map_affinity_to_grid(aff, &scene.hits, enc_cfg.grid_hw)?;
            let x = prototype_pixel_features(enc.g.weights, ha, p_vox)?;
            let cents = mask_centroids(x, &scene.masks)?;
            contrastive_loss(x, &cents, &scene.masks, config.loss.tau_cls)?
        }
        _ => tape.constant_scalar(0.0),
    };
    let l_cons = if branches.len() > 1 {
        consistency_loss(&branches, config.loss.tau_cons)?
    } else {
        tape.constant_scalar(0.0)
    };
    let contrastive = finite_scalar("contrastive loss", l_cls)?;
    let consistency = finite_scalar("consistency loss", l_cons)?;
    let total = total_loss(&branch_losses, l_cls, l_cons, &config.loss.weights)?;
    let total_value = finite_scalar("total loss", total)?;
    let n = branches.len() as f64;
    Ok(ForwardPass {
        branches,
        total,
        total_value,
        ce: ce_sum / n,
        lovasz: lov_sum / n,
        contrastive,
        consistency,
    })
}

// ── Evaluation ──

/// Aggregate validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean IoU over semantic classes (free space excluded).
    pub miou: Option<f64>,
    /// Mean IoU over all classes including free space.
    pub miou_with_free: Option<f64>,
    /// Binary occupied-vs-free IoU.
    pub occupied_iou: Option<f64>,
    /// Per-class IoU; `None` for classes absent from both sides.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean per-cell pairwise L2 distance between branch distributions
    /// (0 for a single-branch plan).
    pub branch_disagreement: f64,
    /// Mean total loss under the evaluation plan.
    pub mean_loss: f64,
}

/// Mean over branch pairs and cells of the L2 distance between the two
/// branches' per-cell distributions.
fn pairwise_disagreement(branches: &[Tensor]) -> f64 {
    if branches.len() < 2 {
        return 0.0;
    }
    let shape = branches[0].shape();
    let (cells, l) = (shape[0], shape[1]);
    let (mut acc, mut pairs) = (0.0, 0usize);
    for p in 0..branches.len() {
        for q in p + 1..branches.len() {
            let (a, b) = (branches[p].data(), branches[q].data());
            let mut sum = 0.0;
            for c in 0..cells {
                let mut s = 0.0;
                for k in 0..l {
                    let d = a[c * l + k] - b[c * l + k];
                    s += d * d;
                }
                sum += s.sqrt();
            }
            acc += sum / cells as f64;
            pairs += 1;
        }
    }
    acc / pairs as f64
}

/// Evaluation under an explicit augmentation plan: branch 0 drives the IoU
/// metrics, the extra branches only feed the disagreement measure.
pub(crate) fn evaluate_with_plan(
    config: &ExperimentConfig,
    params: &ModelParams,
    scenes: &[PreparedScene],
    plan: &AugmentationPlan,
    rng: &StreamRng,
) -> Result<EvalMetrics> {
    let num_classes = config.num_classes();
    if scenes.is_empty() {
        return Ok(EvalMetrics {
            miou: None,
            miou_with_free: None,
            occupied_iou: None,
            per_class_iou: vec![None; num_classes],
            branch_disagreement: 0.0,
            mean_loss: 0.0,
        });
    }
    let mut pred_all = Vec::new();
    let mut gt_all = Vec::new();
    let (mut disagreement, mut loss_sum) = (0.0, 0.0);
    for (si, scene) in scenes.iter().enumerate() {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let fw = forward_scene(&bound, config, plan, scene, &rng.child("scene", si as u64))?;
        let values: Vec<Tensor> = fw.branches.iter().map(|b| b.value()).collect();
        pred_all.extend(argmax_labels(&values[0])?);
        gt_all.extend_from_slice(&scene.labels);
        disagreement += pairwise_disagreement(&values);
        loss_sum += fw.total_value;
    }
    let n = scenes.len() as f64;
    let (per_class_iou, miou_occ) = miou(&pred_all, &gt_all, num_classes, true)?;
    let (_, miou_all) = miou(&pred_all, &gt_all, num_classes, false)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred_all.iter().zip(&gt_all) {
        inter += usize::from(p != 0 && g != 0);
        union += usize::from(p != 0 || g != 0);
    }
    Ok(EvalMetrics {
        miou: miou_occ,
        miou_with_free: miou_all,
        occupied_iou: (union > 0).then(|| inter as f64 / union as f64),
        per_class_iou,
        branch_disagreement: disagreement / n,
        mean_loss: loss_sum / n,
    })
}

/// Deterministic branch-0-only evaluation of a model on a scene set.
pub fn evaluate(
    config: &ExperimentConfig,
    params: &ModelParams,
    scenes: &[PreparedScene],
) -> Result<EvalMetrics> {
    evaluate_with_plan(config, params, scenes, &AugmentationPlan::identity_only(), &StreamRng::new(0))
}

// ── Metrics log ──

/// One epoch's numbers. `wall_secs` is informational only: it is excluded
/// from serialization so logs of identical runs compare bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Epoch means of the training-loss components (`ce`/`lovasz` are
    /// additionally averaged over branches).
    pub train_total: f64,
    pub train_ce: f64,
    pub train_lovasz: f64,
    pub train_contrastive: f64,
    pub train_consistency: f64,
    pub val_miou: Option<f64>,
    pub val_miou_with_free: Option<f64>,
    pub val_occupied_iou: Option<f64>,
    pub val_disagreement: f64,
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    /// Copy with wall times zeroed, for comparing runs.
    pub fn comparable(&self) -> MetricsLog {
        let mut out = self.clone();
        for r in &mut out.records {
            r.wall_secs = 0.0;
        }
        out
    }

    /// CSV rendering, one row per epoch (wall time excluded).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(format!("metrics csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(format!("metrics csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::format(format!("metrics csv: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<MetricsLog> {
        Ok(serde_json::from_str(s)?)
    }
}

// ── Training ──

/// Trained parameters plus the per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub log: MetricsLog,
}

/// Trains a fresh model on the prepared dataset.
///
/// `seed` drives initialisation and every augmentation draw; the data comes
/// fully prepared, so identical `(config, data, seed)` reproduce the run bit
/// for bit. One scene per optimizer step, in scene order.
pub fn train(config: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<TrainResult> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let plan = if config.model.multi_perspective {
        config.augmentation.clone()
    } else {
        AugmentationPlan::identity_only()
    };
    plan.validate()?;
    let root = StreamRng::new(seed);
    let mut params = ModelParams::init(config, &root.child("init", 0))?;
    let mut opt = AdamW::new(&params, config.optimizer.clone())?;
    let total_steps = config.data.epochs * data.train.len();
    let mut log = MetricsLog::default();
    for epoch in 0..config.data.epochs {
        let started = Instant::now();
        let mut sums = [0.0f64; 5];
        for (i, scene) in data.train.iter().enumerate() {
            let step = epoch * data.train.len() + i;
            let gs = {
                let tape = Tape::new();
                let bound = params.bind(&tape, true);
                let rng = root.child("train.step", step as u64);
                let fw = forward_scene(&bound, config, &plan, scene, &rng)?;
                let grads = fw.total.backward()?;
                for (s, v) in sums.iter_mut().zip([
                    fw.total_value,
                    fw.ce,
                    fw.lovasz,
                    fw.contrastive,
                    fw.consistency,
                ]) {
                    *s += v;
                }
                bound.vars().into_iter().map(|v| grads.tensor(v)).collect::<Vec<_>>()
            };
            let lr_scale = config.optimizer.schedule.factor(step, total_steps);
            opt.step(&mut params, &gs, lr_scale)?;
        }
        let n = data.train.len() as f64;
        let eval = evaluate_with_plan(
            config,
            &params,
            &data.val,
            &plan,
            &root.child("eval.aug", epoch as u64),
        )?;
        let record = EpochRecord {
            epoch,
            train_total: sums[0] / n,
            train_ce: sums[1] / n,
            train_lovasz: sums[2] / n,
            train_contrastive: sums[3] / n,
            train_consistency: sums[4] / n,
            val_miou: eval.miou,
            val_miou_with_free: eval.miou_with_free,
            val_occupied_iou: eval.occupied_iou,
            val_disagreement: eval.branch_disagreement,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_total {:.4}, val_miou {:?}, {:.1}s",
            record.train_total,
            record.val_miou,
            record.wall_secs
        );
        log.records.push(record);
    }
    Ok(TrainResult { params, log })
}

// ── Tests ──
