//! Experiment harness: configuration, model assembly, the synthetic-scene
//! data pipeline, training/evaluation/ablation drivers, checkpoints, and the
//! verification suites behind the `gradcheck` / `oracle-check` subcommands.
//!
//! Everything downstream of a config is deterministic: scene generation and
//! rendering derive from `config.seed`, parameter initialisation and the
//! training-time augmentation draws derive from the `seed` passed to
//! [`train`], and all randomness flows through named [`StreamRng`] streams.

mod ablate;
mod checkpoint;
mod train;
pub mod verify;

pub use ablate::{ablate, AblationGrid, AblationTable, ConfigPatch, RunRecord, SummaryRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, POCC_MAGIC, POCC_VERSION};
pub use train::{
    evaluate, train, EpochRecord, EvalMetrics, MetricsLog, OptimizerConfig, Schedule, TrainResult,
};

use crate::clustering::{
    generate_pseudo_masks, init_prototypes_views, iterate_prototypes, MaskGenerator,
    PrototypeSet2D, PseudoMaskInput, PseudoMaskSet, DEFAULT_ASSIGN_TAU, DEFAULT_DOWNSAMPLE,
    DEFAULT_PROTO_ITERS,
};
use crate::decoder::{AugmentationPlan, BoundDecoder, DecoderParams, DEFAULT_TAU_CONS};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numeric::{StreamRng, Tape, Tensor, Var};
use crate::proto_opt::DEFAULT_TAU_CLS;
use crate::scene::{
    generate_scene, project_voxels, render_views, CameraRig, HitSet, SceneConfig, SceneSample,
};
use crate::scene::{FeatureMaps, WorldBounds};
use crate::view_transform::{BoundEncoder, EncodeConfig, EncoderParams};
use serde::{Deserialize, Serialize};

// ── Configuration ──

/// Camera rig and renderer settings; the rendered image resolution doubles
/// as the feature, attention-map, and pseudo-mask resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub num_views: usize,
    /// Rendered `(height, width)` in pixels.
    pub image_hw: (usize, usize),
    pub fov_deg: f64,
    /// Orbit radius / height as fractions of the world diagonal.
    pub radius_scale: f64,
    pub height_scale: f64,
    /// Gaussian noise added to every rendered feature channel.
    pub noise_sigma: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            num_views: 2,
            image_hw: (24, 32),
            fov_deg: 75.0,
            radius_scale: 1.1,
            height_scale: 0.35,
            noise_sigma: 0.1,
        }
    }
}

/// Architecture knobs and the three ablation toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature / query channel width.
    pub d: usize,
    /// Coarse query grid extents (cells along x, y, z).
    pub query_extents: [usize; 3],
    pub encoder_layers: usize,
    pub n_points: usize,
    /// Prototype grid downsampling factor r.
    pub downsample: usize,
    pub proto_iters: usize,
    pub assign_tau: f64,
    /// Channel widths of the strided upsampler stages.
    pub decoder_hidden: Vec<usize>,
    /// Prototype-based aggregate/dispatch in the encoder.
    pub prototype_mapping: bool,
    /// Prototype-level contrastive objective.
    pub prototype_optimization: bool,
    /// Multi-perspective decoding (augmented branches + consistency).
    pub multi_perspective: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            query_extents: [8, 8, 4],
            encoder_layers: 3,
            n_points: 4,
            downsample: DEFAULT_DOWNSAMPLE,
            proto_iters: DEFAULT_PROTO_ITERS,
            assign_tau: DEFAULT_ASSIGN_TAU,
            decoder_hidden: vec![16, 8],
            prototype_mapping: true,
            prototype_optimization: true,
            multi_perspective: true,
        }
    }
}

/// Pseudo-mask settings for the contrastive objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub generator: MaskGenerator,
    /// Requested segment count per view.
    pub s_target: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { generator: MaskGenerator::GridKmeans, s_target: 10 }
    }
}

/// Objective weights and temperatures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub tau_cls: f64,
    pub tau_cons: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), tau_cls: DEFAULT_TAU_CLS, tau_cons: DEFAULT_TAU_CONS }
    }
}

/// Benchmark sizing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub epochs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_scenes: 200, val_scenes: 40, epochs: 10 }
    }
}

/// The complete experiment description; JSON round-trippable, unknown keys
/// rejected, and (together with a seed) sufficient to reproduce every
/// reported number bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub model: ModelConfig,
    pub masks: MaskConfig,
    pub augmentation: AugmentationPlan,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    /// Root seed for scene generation and rendering.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            model: ModelConfig::default(),
            masks: MaskConfig::default(),
            augmentation: AugmentationPlan::dropout_noise(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            seed: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn num_classes(&self) -> usize {
        self.scene.num_classes
    }

    /// Cells of the coarse query grid.
    pub fn query_cells(&self) -> usize {
        self.model.query_extents.iter().product()
    }

    /// Cells of the full occupancy grid.
    pub fn occupancy_cells(&self) -> usize {
        self.scene.grid.iter().product()
    }

    pub fn world_bounds(&self) -> &WorldBounds {
        &self.scene.world_bounds
    }

    /// The deterministic camera rig implied by the config.
    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::orbit(
            self.camera.num_views,
            &self.scene.world_bounds,
            self.camera.image_hw,
            self.camera.fov_deg,
            self.camera.radius_scale,
            self.camera.height_scale,
        )
    }

    /// Encoder settings implied by the config.
    pub fn encode_config(&self) -> EncodeConfig {
        let mut cfg = EncodeConfig::new(self.camera.image_hw);
        cfg.encoder_layers = self.model.encoder_layers;
        cfg.n_points = self.model.n_points;
        cfg.use_prototypes = self.model.prototype_mapping;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.loss.weights.validate()?;
        self.augmentation.validate()?;
        self.optimizer.validate()?;
        if self.camera.num_views == 0 {
            return Err(Error::config("camera.num_views", "need at least one camera"));
        }
        if self.camera.image_hw.0 == 0 || self.camera.image_hw.1 == 0 {
            return Err(Error::config("camera.image_hw", "image must be nonempty"));
        }
        if !(self.camera.noise_sigma >= 0.0) {
            return Err(Error::config("camera.noise_sigma", "must be >= 0"));
        }
        if self.model.d < self.scene.num_classes + 1 {
            return Err(Error::config(
                "model.d",
                format!("{} channels cannot hold {} classes + depth", self.model.d, self.scene.num_classes),
            ));
        }
        if self.model.query_extents.iter().any(|&e| e == 0) {
            return Err(Error::config("model.query_extents", "extents must be positive"));
        }
        for (q, o) in self.model.query_extents.iter().zip(self.scene.grid) {
            if o % q != 0 {
                return Err(Error::config(
                    "model.query_extents",
                    format!("{:?} does not divide the occupancy grid {:?}", self.model.query_extents, self.scene.grid),
                ));
            }
        }
        if self.model.downsample == 0 {
            return Err(Error::config("model.downsample", "must be positive"));
        }
        if self.model.prototype_optimization && !self.model.prototype_mapping {
            return Err(Error::config(
                "model.prototype_optimization",
                "prototype optimization requires prototype mapping",
            ));
        }
        if !(self.model.assign_tau > 0.0) {
            return Err(Error::config("model.assign_tau", "must be positive"));
        }
        if self.model.decoder_hidden.is_empty() {
            return Err(Error::config("model.decoder_hidden", "need at least one stage"));
        }
        if self.masks.s_target == 0 {
            return Err(Error::config("masks.s_target", "must be positive"));
        }
        if !(self.loss.tau_cls > 0.0) || !(self.loss.tau_cons > 0.0) {
            return Err(Error::config("loss.tau_cls", "temperatures must be positive"));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::config("data.train_scenes", "need at least one training scene"));
        }
        Ok(())
    }
}

// ── Model ──

/// All learnable parameters: the voxel queries, the encoder, the decoder.
#[derive(Clone, Debug)]
pub struct ModelParams {
    /// Learnable voxel query grid `[cells, d]`.
    pub queries: Tensor,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init(config: &ExperimentConfig, rng: &StreamRng) -> Result<Self> {
        config.validate()?;
        let cells = config.query_cells();
        let d = config.model.d;
        Ok(ModelParams {
            queries: rng.normal_tensor("model.queries", 0, &[cells, d], 0.1),
            encoder: EncoderParams::init(d, config.model.n_points, config.model.encoder_layers, rng),
            decoder: DecoderParams::init(
                d,
                &config.model.decoder_hidden,
                config.model.query_extents,
                config.scene.grid,
                config.num_classes(),
                rng,
            )?,
        })
    }

    /// Visits every parameter; same order as [`BoundModel::vars`].
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("queries".to_string(), &self.queries);
        self.encoder.for_each_tensor("encoder", f);
        self.decoder.for_each_tensor("decoder", f);
    }

    /// Mutable variant, same traversal order.
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("queries".to_string(), &mut self.queries);
        self.encoder.for_each_tensor_mut("encoder", f);
        self.decoder.for_each_tensor_mut("decoder", f);
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, _| n += 1);
        n
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        BoundModel {
            queries: if trainable { tape.leaf(self.queries.clone()) } else { tape.constant(self.queries.clone()) },
            encoder: self.encoder.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
        }
    }
}

/// Tape-bound model parameters.
pub struct BoundModel<'t> {
    pub queries: Var<'t>,
    pub encoder: BoundEncoder<'t>,
    pub decoder: BoundDecoder<'t>,
}

impl<'t> BoundModel<'t> {
    /// All parameter vars; same order as [`ModelParams::for_each_tensor`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.queries];
        out.extend(self.encoder.vars());
        out.extend(self.decoder.vars());
        out
    }
}

// ── Data pipeline ──

/// Everything about one scene that is constant during training: rendered
/// features, voxel-to-image hits, refined 2D prototypes, pseudo masks, and
/// the occupancy labels.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub labels: Vec<u32>,
    pub fmaps: FeatureMaps,
    pub hits: HitSet,
    pub protos: PrototypeSet2D,
    pub masks: PseudoMaskSet,
}

/// Renders and preprocesses one generated scene under a config.
///
/// Rendering noise is seeded by the scene's own stored seed, so a scene file
/// plus a config reproduces the prepared artifacts exactly.
pub fn prepare_scene(
    sample: &SceneSample,
    rig: &CameraRig,
    config: &ExperimentConfig,
) -> Result<PreparedScene> {
    if sample.occupancy.extents() != config.scene.grid {
        return Err(Error::config(
            "scene.grid",
            format!(
                "scene has extents {:?}, config says {:?}",
                sample.occupancy.extents(),
                config.scene.grid
            ),
        ));
    }
    if sample.occupancy.num_classes() != config.scene.num_classes {
        return Err(Error::config(
            "scene.num_classes",
            format!(
                "scene has {} classes, config says {}",
                sample.occupancy.num_classes(),
                config.scene.num_classes
            ),
        ));
    }
    let bounds = config.world_bounds();
    let (fmaps, gt_masks) = render_views(
        sample,
        rig,
        bounds,
        config.model.d,
        config.camera.noise_sigma,
        sample.seed,
    )?;
    let hits = project_voxels(rig, config.model.query_extents, bounds)?;
    let init = init_prototypes_views(&fmaps.views, config.model.downsample)?;
    let protos = iterate_prototypes(
        &fmaps.views,
        &init,
        config.model.proto_iters,
        config.model.assign_tau,
    )?;
    let input = match config.masks.generator {
        MaskGenerator::GridKmeans => PseudoMaskInput::Features(&fmaps.views),
        MaskGenerator::GroundTruth => PseudoMaskInput::GroundTruth(&gt_masks),
    };
    let masks = generate_pseudo_masks(
        &input,
        config.camera.image_hw,
        config.masks.s_target,
        config.masks.generator,
        sample.seed,
    )?;
    Ok(PreparedScene {
        labels: sample.occupancy.labels().iter().map(|&l| l as u32).collect(),
        fmaps,
        hits,
        protos,
        masks,
    })
}

/// Raw generated scenes plus the rig; preparation is config-dependent, so
/// ablations over e.g. the prototype count share one bank.
#[derive(Clone, Debug)]
pub struct SceneBank {
    pub rig: CameraRig,
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

impl SceneBank {
    /// Generates the benchmark scene set from `config.seed`.
    pub fn generate(config: &ExperimentConfig) -> Result<SceneBank> {
        config.validate()?;
        let root = StreamRng::new(config.seed);
        let gen = |label: &'static str, count: usize| -> Result<Vec<SceneSample>> {
            (0..count)
                .map(|i| generate_scene(&config.scene, root.child(label, i as u64).seed()))
                .collect()
        };
        Ok(SceneBank {
            rig: config.rig()?,
            train: gen("data.train", config.data.train_scenes)?,
            val: gen("data.val", config.data.val_scenes)?,
        })
    }
}

/// Prepared train/validation splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

/// Prepares every scene of a bank under one config.
pub fn prepare_dataset(bank: &SceneBank, config: &ExperimentConfig) -> Result<Dataset> {
    Ok(Dataset {
        train: bank.train.iter().map(|s| prepare_scene(s, &bank.rig, config)).collect::<Result<_>>()?,
        val: bank.val.iter().map(|s| prepare_scene(s, &bank.rig, config)).collect::<Result<_>>()?,
    })
}

// ── Tests ──
