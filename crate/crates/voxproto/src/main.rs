//! Command-line driver: scene generation, training, evaluation, ablation
//! grids, and the gradient / oracle verification suites.
//!
//! Exit codes: 0 on success, 1 on validation failures, 2 on I/O or file
//! format errors.

use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use voxproto::harness::{
    ablate, evaluate, load_checkpoint, prepare_dataset, prepare_scene, save_checkpoint, train,
    verify, AblationGrid, Checkpoint, ExperimentConfig, SceneBank,
};
use voxproto::numeric::StreamRng;
use voxproto::scene::{generate_scene, read_scene, write_scene, SceneSample};
use voxproto::{Error, Result};

#[derive(Parser)]
#[command(name = "voxproto", version, about = "Synthetic 3D semantic occupancy sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene files into a directory.
    GenScenes {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for `.posc` files.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        count: usize,
        /// Root seed for scene generation.
        #[arg(long)]
        seed: u64,
    },
    /// Train on a scene directory and write a checkpoint.
    Train {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Directory of `.posc` scene files (sorted; first
        /// `data.train_scenes` train, next `data.val_scenes` validate).
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch metrics CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every scene in a directory.
    Eval {
        /// Checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of `.posc` scene files.
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Run an ablation grid and write per-run results as CSV.
    Ablate {
        /// Base experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Grid JSON path, or a preset: `model_design`, `augmentations`,
        /// `prototype_counts` (presets run on the config's seed).
        #[arg(long)]
        grid: String,
        /// Per-run results CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-row summary CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for the differentiable operations.
    Gradcheck {
        /// Check a single operation instead of the full suite.
        #[arg(long)]
        op: Option<String>,
    },
    /// Naive-loop reference comparisons for the vectorized operations.
    OracleCheck {
        /// Check a single operation instead of the full suite.
        #[arg(long)]
        op: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes { config, out, count, seed } => gen_scenes(&config, &out, count, seed),
        Command::Train { config, scenes, out, log } => cmd_train(&config, &scenes, &out, log.as_deref()),
        Command::Eval { ckpt, scenes } => cmd_eval(&ckpt, &scenes),
        Command::Ablate { config, grid, out, summary } => {
            cmd_ablate(&config, &grid, &out, summary.as_deref())
        }
        Command::Gradcheck { op } => run_checks(verify::gradient_suite(op.as_deref())?, "gradient"),
        Command::OracleCheck { op } => run_checks(verify::oracle_suite(op.as_deref())?, "oracle"),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sorted `.posc` paths in a directory.
fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "posc"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("no .posc scene files in {}", dir.display())));
    }
    Ok(files)
}

/// Reads one scene file and checks it was generated under the config's
/// camera rig and world bounds.
fn read_compatible_scene(path: &Path, config: &ExperimentConfig) -> Result<SceneSample> {
    let (sample, rig, bounds) = read_scene(path)?;
    if rig != config.rig()? {
        return Err(Error::data(format!(
            "{}: camera rig differs from the one implied by the config",
            path.display()
        )));
    }
    if bounds != *config.world_bounds() {
        return Err(Error::data(format!(
            "{}: world bounds differ from the config's scene bounds",
            path.display()
        )));
    }
    Ok(sample)
}

fn gen_scenes(config: &Path, out: &Path, count: usize, seed: u64) -> Result<()> {
    let config = load_config(config)?;
    fs::create_dir_all(out)?;
    let rig = config.rig()?;
    let root = StreamRng::new(seed);
    for i in 0..count {
        let sample = generate_scene(&config.scene, root.child("gen-scenes", i as u64).seed())?;
        write_scene(&out.join(format!("scene_{i:05}.posc")), &sample, &rig, config.world_bounds())?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, scenes: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let config = load_config(config)?;
    let files = scene_files(scenes)?;
    let need = config.data.train_scenes + config.data.val_scenes;
    if files.len() < need {
        return Err(Error::data(format!(
            "config needs {need} scenes ({} train + {} val) but {} has only {}",
            config.data.train_scenes,
            config.data.val_scenes,
            scenes.display(),
            files.len()
        )));
    }
    let mut samples = files
        .iter()
        .take(need)
        .map(|f| read_compatible_scene(f, &config))
        .collect::<Result<Vec<_>>>()?;
    let val = samples.split_off(config.data.train_scenes);
    let bank = SceneBank { rig: config.rig()?, train: samples, val };
    log::info!("preparing {} train / {} val scenes", bank.train.len(), bank.val.len());
    let data = prepare_dataset(&bank, &config)?;
    let result = train(&config, &data, config.seed)?;
    let step = (config.data.epochs * data.train.len()) as u64;
    save_checkpoint(&Checkpoint::from_model(&config, &result.params, step, config.seed), out)?;
    if let Some(log_path) = log {
        fs::write(log_path, result.log.to_csv()?)?;
    }
    if let Some(last) = result.log.records.last() {
        println!("final epoch: {}", serde_json::to_string(last)?);
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, scenes: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let config = ckpt.config.clone();
    config.validate()?;
    let params = ckpt.to_model()?;
    let rig = config.rig()?;
    let prepared = scene_files(scenes)?
        .iter()
        .map(|f| prepare_scene(&read_compatible_scene(f, &config)?, &rig, &config))
        .collect::<Result<Vec<_>>>()?;
    let metrics = evaluate(&config, &params, &prepared)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn cmd_ablate(config: &Path, grid: &str, out: &Path, summary: Option<&Path>) -> Result<()> {
    let base = load_config(config)?;
    let grid = match grid {
        "model_design" => AblationGrid::model_design(vec![base.seed]),
        "augmentations" => AblationGrid::augmentations(vec![base.seed]),
        "prototype_counts" => AblationGrid::prototype_counts(vec![base.seed]),
        path => serde_json::from_str(&fs::read_to_string(path)?)?,
    };
    let bank = SceneBank::generate(&base)?;
    let table = ablate(&base, &grid, &bank)?;
    fs::write(out, table.to_csv()?)?;
    if let Some(s) = summary {
        fs::write(s, table.summary_csv()?)?;
    }
    print!("{}", table.render_summary());
    println!("results written to {}", out.display());
    Ok(())
}

fn run_checks(reports: Vec<verify::SuiteReport>, kind: &str) -> Result<()> {
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<26} {:>4} instances  max err {:>10.3e}  tol {:.0e}  {:>6.2}s  {}",
            r.op,
            r.instances,
            r.max_err,
            r.tolerance,
            r.seconds,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!("{kind} checks failed: {}", failed.join(", "))))
    }
}
