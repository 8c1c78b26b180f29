//! Ablation driver: a grid of named config patches crossed with seeds, each
//! trained and evaluated, collected into machine-readable CSV plus a
//! mean-over-seeds summary.

use super::{prepare_dataset, train, Dataset, ExperimentConfig, SceneBank};
use crate::decoder::{
    AugmentationPlan, AugmentationSpec, Axis, DEFAULT_DROPOUT_P, DEFAULT_NOISE_SIGMA,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

// ── Grid description ──

/// A named partial override of the base config; unset fields keep the base
/// value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigPatch {
    pub name: String,
    pub prototype_mapping: Option<bool>,
    pub prototype_optimization: Option<bool>,
    pub multi_perspective: Option<bool>,
    pub augmentation: Option<AugmentationPlan>,
    /// Consistency-loss weight override.
    pub lambda4: Option<f64>,
    /// Prototype downsampling ratio override (the M sweep).
    pub downsample: Option<usize>,
}

impl ConfigPatch {
    pub fn named(name: &str) -> ConfigPatch {
        ConfigPatch { name: name.to_string(), ..ConfigPatch::default() }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        if let Some(v) = self.prototype_mapping {
            c.model.prototype_mapping = v;
        }
        if let Some(v) = self.prototype_optimization {
            c.model.prototype_optimization = v;
        }
        if let Some(v) = self.multi_perspective {
            c.model.multi_perspective = v;
        }
        if let Some(p) = &self.augmentation {
            c.augmentation = p.clone();
        }
        if let Some(l) = self.lambda4 {
            c.loss.weights.lambda4 = l;
        }
        if let Some(r) = self.downsample {
            c.model.downsample = r;
        }
        c
    }
}

/// Rows × seeds to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub rows: Vec<ConfigPatch>,
    pub seeds: Vec<u64>,
}

fn toggles(name: &str, mapping: bool, opt: bool, multi: bool) -> ConfigPatch {
    ConfigPatch {
        prototype_mapping: Some(mapping),
        prototype_optimization: Some(opt),
        multi_perspective: Some(multi),
        ..ConfigPatch::named(name)
    }
}

impl AblationGrid {
    /// Model-design grid: baseline, each contribution alone, and the full
    /// model (5 rows).
    pub fn model_design(seeds: Vec<u64>) -> AblationGrid {
        AblationGrid {
            rows: vec![
                toggles("baseline", false, false, false),
                toggles("mapping", true, false, false),
                toggles("mapping_opt", true, true, false),
                toggles("mod_only", false, false, true),
                toggles("full", true, true, true),
            ],
            seeds,
        }
    }

    /// Augmentation grid: 11 combinations of {dropout, noise, transpose,
    /// flips} crossed with consistency regularization on/off (22 rows).
    pub fn augmentations(seeds: Vec<u64>) -> AblationGrid {
        let dropout = AugmentationSpec::RandomDropout { p: DEFAULT_DROPOUT_P };
        let noise = AugmentationSpec::GaussianNoise { sigma: DEFAULT_NOISE_SIGMA };
        let transpose = AugmentationSpec::Transpose { a: Axis::X, b: Axis::Y };
        let flips = AugmentationSpec::Flip { axes: vec![Axis::X, Axis::Y] };
        let combos: [(&str, Vec<AugmentationSpec>); 11] = [
            ("none", vec![]),
            ("dropout", vec![dropout.clone()]),
            ("noise", vec![noise.clone()]),
            ("transpose", vec![transpose.clone()]),
            ("flips", vec![flips.clone()]),
            ("dropout_transpose", vec![dropout.clone(), transpose.clone()]),
            ("dropout_flips", vec![dropout.clone(), flips.clone()]),
            ("noise_transpose", vec![noise.clone(), transpose.clone()]),
            ("noise_flips", vec![noise.clone(), flips.clone()]),
            ("dropout_noise", vec![dropout, noise]),
            ("transpose_flips", vec![transpose, flips]),
        ];
        let mut rows = Vec::with_capacity(22);
        for (name, specs) in combos {
            // Each augmentation is its own decoded branch.
            let plan = AugmentationPlan { branches: specs.into_iter().map(|s| vec![s]).collect() };
            for (suffix, lambda4) in [("cr_off", 0.0), ("cr_on", 1.0)] {
                rows.push(ConfigPatch {
                    multi_perspective: Some(true),
                    augmentation: Some(plan.clone()),
                    lambda4: Some(lambda4),
                    ..ConfigPatch::named(&format!("{name}/{suffix}"))
                });
            }
        }
        AblationGrid { rows, seeds }
    }

    /// Prototype-count sweep over the downsampling ratio.
    pub fn prototype_counts(seeds: Vec<u64>) -> AblationGrid {
        AblationGrid {
            rows: [2usize, 4, 6, 8]
                .into_iter()
                .map(|r| ConfigPatch { downsample: Some(r), ..ConfigPatch::named(&format!("r{r}")) })
                .collect(),
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::param("ablation grid has no rows"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("ablation grid has no seeds"));
        }
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.rows.len() {
            return Err(Error::param("ablation row names must be unique and nonempty"));
        }
        if names.contains(&"") {
            return Err(Error::param("ablation row names must be unique and nonempty"));
        }
        Ok(())
    }
}

// ── Results ──

/// One configuration × seed outcome (final epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: String,
    pub seed: u64,
    pub prototype_mapping: bool,
    pub prototype_optimization: bool,
    pub multi_perspective: bool,
    pub lambda4: f64,
    /// 2D prototypes per view implied by the downsampling ratio.
    pub num_prototypes: usize,
    pub val_miou: Option<f64>,
    pub val_miou_with_free: Option<f64>,
    pub val_occupied_iou: Option<f64>,
    pub final_disagreement: f64,
    pub final_train_total: f64,
}

/// Per-row aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub row: String,
    pub seeds: usize,
    pub mean_val_miou: Option<f64>,
    /// Sample standard deviation (0 for a single seed).
    pub std_val_miou: Option<f64>,
    pub mean_disagreement: f64,
}

/// All runs plus the per-row summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRecord>,
}

fn csv_of<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(format!("ablation csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(format!("ablation csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::format(format!("ablation csv: {e}")))
}

impl AblationTable {
    /// One CSV row per configuration × seed.
    pub fn to_csv(&self) -> Result<String> {
        csv_of(&self.runs)
    }

    /// One CSV row per configuration, mean ± std over seeds.
    pub fn summary_csv(&self) -> Result<String> {
        csv_of(&self.summary)
    }

    /// Plain-text summary table.
    pub fn render_summary(&self) -> String {
        let mut out = format!(
            "{:<24} {:>5} {:>12} {:>12} {:>14}\n",
            "row", "seeds", "miou_mean", "miou_std", "disagreement"
        );
        let opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "n/a".to_string(),
        };
        for s in &self.summary {
            out.push_str(&format!(
                "{:<24} {:>5} {:>12} {:>12} {:>14.6}\n",
                s.row,
                s.seeds,
                opt(s.mean_val_miou),
                opt(s.std_val_miou),
                s.mean_disagreement
            ));
        }
        out
    }
}

// ── Runner ──

/// Number of 2D prototypes per view at the config's image resolution.
fn prototypes_per_view(config: &ExperimentConfig) -> usize {
    let (h, w) = config.camera.image_hw;
    h.div_ceil(config.model.downsample) * w.div_ceil(config.model.downsample)
}

/// Trains every row × seed of the grid on one shared scene bank.
///
/// Scene preparation is reused across rows that prepare data identically
/// (only the downsampling ratio affects preparation among patch fields).
pub fn ablate(
    base: &ExperimentConfig,
    grid: &AblationGrid,
    bank: &SceneBank,
) -> Result<AblationTable> {
    base.validate()?;
    grid.validate()?;
    let mut datasets: HashMap<usize, Dataset> = HashMap::new();
    let mut runs = Vec::with_capacity(grid.rows.len() * grid.seeds.len());
    let mut summary = Vec::with_capacity(grid.rows.len());
    for row in &grid.rows {
        let config = row.apply(base);
        config.validate()?;
        let key = config.model.downsample;
        if !datasets.contains_key(&key) {
            datasets.insert(key, prepare_dataset(bank, &config)?);
        }
        let data = &datasets[&key];
        let mut mious = Vec::new();
        let mut disagreements = Vec::new();
        for &seed in &grid.seeds {
            log::info!("ablate: row `{}` seed {seed}", row.name);
            let out = train(&config, data, seed)?;
            let last = out
                .log
                .records
                .last()
                .ok_or_else(|| Error::data("training produced no epochs"))?;
            if let Some(m) = last.val_miou {
                mious.push(m);
            }
            disagreements.push(last.val_disagreement);
            runs.push(RunRecord {
                row: row.name.clone(),
                seed,
                prototype_mapping: config.model.prototype_mapping,
                prototype_optimization: config.model.prototype_optimization,
                multi_perspective: config.model.multi_perspective,
                lambda4: config.loss.weights.lambda4,
                num_prototypes: prototypes_per_view(&config),
                val_miou: last.val_miou,
                val_miou_with_free: last.val_miou_with_free,
                val_occupied_iou: last.val_occupied_iou,
                final_disagreement: last.val_disagreement,
                final_train_total: last.train_total,
            });
        }
        let n = mious.len() as f64;
        let mean = (n > 0.0).then(|| mious.iter().sum::<f64>() / n);
        let std = mean.map(|m| {
            if mious.len() < 2 {
                0.0
            } else {
                (mious.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        });
        summary.push(SummaryRecord {
            row: row.name.clone(),
            seeds: grid.seeds.len(),
            mean_val_miou: mean,
            std_val_miou: std,
            mean_disagreement: disagreements.iter().sum::<f64>() / disagreements.len() as f64,
        });
    }
    Ok(AblationTable { runs, summary })
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tests::tiny_config;

    #[test]
    fn preset_grids_have_the_published_shapes() {
        let md = AblationGrid::model_design(vec![1, 2, 3]);
        assert_eq!(md.rows.len(), 5);
        md.validate().unwrap();
        let aug = AblationGrid::augmentations(vec![1]);
        assert_eq!(aug.rows.len(), 22);
        aug.validate().unwrap();
        // 11 combos, each with a consistency-on and a consistency-off row.
        let on = aug.rows.iter().filter(|r| r.lambda4 == Some(1.0)).count();
        let off = aug.rows.iter().filter(|r| r.lambda4 == Some(0.0)).count();
        assert_eq!((on, off), (11, 11));
        let pc = AblationGrid::prototype_counts(vec![1]);
        assert_eq!(pc.rows.len(), 4);
        assert_eq!(
            pc.rows.iter().map(|r| r.downsample.unwrap()).collect::<Vec<_>>(),
            vec![2, 4, 6, 8]
        );
        // Grids survive a JSON round-trip (the CLI reads them from files).
        let json = serde_json::to_string(&aug).unwrap();
        assert_eq!(serde_json::from_str::<AblationGrid>(&json).unwrap(), aug);
        // Duplicate names are rejected.
        let mut bad = AblationGrid::model_design(vec![1]);
        bad.rows[1].name = "baseline".to_string();
        assert!(bad.validate().is_err());
        assert!(AblationGrid { rows: vec![], seeds: vec![1] }.validate().is_err());
    }

    #[test]
    fn single_row_grid_equals_direct_training_and_csv_parses_back() {
        let config = tiny_config();
        let bank = crate::harness::SceneBank::generate(&config).unwrap();
        let grid = AblationGrid {
            rows: vec![toggles("baseline", false, false, false)],
            seeds: vec![9],
        };
        let table = ablate(&config, &grid, &bank).unwrap();
        assert_eq!(table.runs.len(), 1);
        assert_eq!(table.summary.len(), 1);

        let direct_cfg = grid.rows[0].apply(&config);
        let data = prepare_dataset(&bank, &direct_cfg).unwrap();
        let direct = train(&direct_cfg, &data, 9).unwrap();
        let last = direct.log.records.last().unwrap();
        assert_eq!(table.runs[0].val_miou, last.val_miou);
        assert_eq!(table.runs[0].final_train_total, last.train_total);
        assert_eq!(table.summary[0].std_val_miou, Some(0.0));

        let csv = table.to_csv().unwrap();
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        let parsed: Vec<RunRecord> = rdr.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(parsed, table.runs);
        let summary_csv = table.summary_csv().unwrap();
        assert!(summary_csv.starts_with("row,seeds,mean_val_miou"));
        assert!(table.render_summary().contains("baseline"));
    }

    #[test]
    fn patches_touch_only_their_fields() {
        let base = tiny_config();
        let patch = ConfigPatch {
            lambda4: Some(0.0),
            downsample: Some(2),
            ..ConfigPatch::named("x")
        };
        let patched = patch.apply(&base);
        assert_eq!(patched.loss.weights.lambda4, 0.0);
        assert_eq!(patched.model.downsample, 2);
        assert_eq!(patched.model.prototype_mapping, base.model.prototype_mapping);
        assert_eq!(patched.scene, base.scene);
        assert_eq!(prototypes_per_view(&patched), 6 * 8);
        // An unnamed row fails grid validation.
        let grid = AblationGrid { rows: vec![ConfigPatch::default()], seeds: vec![1] };
        assert!(grid.validate().is_err());
    }
}
