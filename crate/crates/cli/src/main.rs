use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffloc_core::data::{self, FolderDataset, Sample};
use diffloc_core::eval::{self, AblationSetup, AttackGrid};
use diffloc_core::pipeline::{self, Checkpoint, TrainConfig, Trainer};
use diffloc_core::Device;
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

/// Written by `gen-data` next to `images/` and `masks/`.
const DATASET_META: &str = "dataset.json";

#[derive(Parser)]
#[command(name = "diffloc", version, about = "Inpainting localization by conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Predict a tamper-probability map for one image.
    Infer(InferArgs),
    /// Mean pixel AUC of a checkpoint on a dataset folder.
    Eval(EvalArgs),
    /// Train or load the four DMFE x ES variants and compare them.
    Ablate(AblateArgs),
    /// AUC under increasingly strong perturbations.
    Attack(AttackArgs),
    /// Write a synthetic dataset folder.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; missing fields take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset folder with `images/` and `masks/`.
    #[arg(long, required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many generated images instead of a folder.
    #[arg(long, conflicts_with = "data")]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Checkpoint directory.
    #[arg(long, default_value = "checkpoint")]
    out: PathBuf,
    /// Continue from the checkpoint already in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Average this many independent chains.
    #[arg(long, default_value_t = 1)]
    ensemble: usize,
    /// Also render the per-stage trace grid.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Directory for `report.txt` and `report.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Base config; the DMFE and ES flags are overridden per cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-cell checkpoints live under this directory.
    #[arg(long, default_value = "ablation")]
    ckpt_root: PathBuf,
    /// Train cells that have no checkpoint yet.
    #[arg(long)]
    train: bool,
    /// Fraction of the sorted dataset held out for evaluation.
    #[arg(long, default_value_t = 0.25)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON attack grid; the built-in grid when absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value = "robustness")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
    n: usize,
    size: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Attack(a) => attack(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(p) = path else {
        return Ok(TrainConfig::desk());
    };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let user: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    let mut merged = serde_json::to_value(TrainConfig::desk())?;
    overlay(&mut merged, user);
    let cfg: TrainConfig = serde_json::from_value(merged).with_context(|| format!("parsing {}", p.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `top` over `base`, descending into objects present in both.
fn overlay(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Folder samples plus the seed recorded by `gen-data`, or 0 for foreign data.
fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, u64)> {
    let FolderDataset { samples, unpaired } =
        data::load_folder(dir).with_context(|| format!("loading {}", dir.display()))?;
    for p in &unpaired {
        log::warn!("no mask for {}", p.display());
    }
    if samples.is_empty() {
        bail!("{} holds no image/mask pairs", dir.display());
    }
    let seed = match fs::read_to_string(dir.join(DATASET_META)) {
        Ok(s) => serde_json::from_str::<DatasetMeta>(&s)?.seed,
        Err(_) => 0,
    };
    Ok((samples, seed))
}

fn train(a: TrainArgs) -> Result<()> {
    let device = Device::Cpu;
    let (samples, data_seed) = match (&a.data, a.synthetic) {
        (Some(dir), _) => load_dataset(dir)?,
        (None, Some(n)) => (data::generate_synthetic(n, a.size, a.data_seed)?, a.data_seed),
        (None, None) => unreachable!("clap requires one data source"),
    };
    let mut trainer = if a.resume {
        Trainer::resume(&a.out, &device)?
    } else {
        let mut cfg = load_config(a.config.as_deref())?;
        if a.max_steps.is_some() {
            cfg.max_steps = a.max_steps;
        }
        let total = cfg.total_steps(samples.len());
        Trainer::new(&cfg, total, &device)?
    };
    let fp = trainer.config().fingerprint(data_seed);
    log::info!(
        "training {} images for {} steps (fingerprint {fp}, {} parameters)",
        samples.len(),
        trainer.total_steps(),
        trainer.model().store().num_params()
    );
    trainer.fit(&samples, |r| {
        if r.step % 10 == 0 || r.step == 1 {
            log::info!("step {} loss {:.4} lr {:.2e} |g| {:.3}", r.step, r.loss, r.lr, r.grad_norm);
        }
    })?;
    trainer.save_checkpoint(&a.out)?;
    println!("saved checkpoint at step {} to {}", trainer.step(), a.out.display());
    Ok(())
}

/// The image resized so both sides are multiples of 32 (at least 32).
fn fit_to_grid(img: &image::RgbImage) -> image::RgbImage {
    let snap = |v: u32| ((v + 16) / 32).max(1) * 32;
    let (w, h) = img.dimensions();
    let (nw, nh) = (snap(w), snap(h));
    if (nw, nh) == (w, h) {
        img.clone()
    } else {
        image::imageops::resize(img, nw, nh, FilterType::Triangle)
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt, &Device::Cpu)?;
    let original = image::open(&a.image)
        .with_context(|| format!("reading {}", a.image.display()))?
        .to_rgb8();
    let (w, h) = original.dimensions();
    let input = data::image_to_array(&fit_to_grid(&original));
    let sched = ck.config.schedule()?;
    let sampler = ck.config.sampler();
    fs::create_dir_all(&a.out)?;
    let restore = |map: &ndarray::Array2<f32>| {
        let g = data::map_to_gray(map);
        if g.dimensions() == (w, h) {
            g
        } else {
            image::imageops::resize(&g, w, h, FilterType::Triangle)
        }
    };
    if a.trace {
        let out = pipeline::sample(&ck.model, &sched, &sampler, &input, a.seed)?;
        let trace = out.trace.expect("single-image sampling keeps its trace");
        let path = a.out.join("trace.png");
        eval::render_trace(&trace, &path)?;
        println!("trace ({} stages) -> {}", trace.len(), path.display());
    }
    let ens = pipeline::sample_ensemble(&ck.model, &sched, &sampler, &input, a.ensemble, a.seed)?;
    let prob = a.out.join("prob.png");
    restore(&ens.mean).save(&prob)?;
    println!("probability map -> {}", prob.display());
    if ens.members > 1 {
        // Variance of values in [0, 1] is at most 0.25.
        let var = a.out.join("variance.png");
        restore(&(&ens.var * 4.0)).save(&var)?;
        println!("ensemble variance ({} members) -> {}", ens.members, var.display());
    }
    Ok(())
}

fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in files {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt, &Device::Cpu)?;
    let (samples, data_seed) = load_dataset(&a.data)?;
    let fp = ck.config.fingerprint(data_seed);
    let report = eval::evaluate(
        &ck.model,
        &ck.config.schedule()?,
        &ck.config.sampler(),
        &samples,
        a.seed,
        a.batch,
        &fp,
    )?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        write_outputs(dir, &[("report.txt", report.to_text()), ("report.csv", report.to_csv())])?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.holdout) || a.holdout == 0.0 {
        bail!("--holdout must be in (0, 1), got {}", a.holdout);
    }
    let base = load_config(a.config.as_deref())?;
    let (samples, data_seed) = load_dataset(&a.data)?;
    let n_test = ((samples.len() as f64 * a.holdout).round() as usize).clamp(1, samples.len() - 1);
    let (train, test) = samples.split_at(samples.len() - n_test);
    log::info!("{} training and {} held-out images", train.len(), test.len());
    let report = eval::run_ablation(&AblationSetup {
        base: &base,
        train,
        test,
        dataset_seed: data_seed,
        checkpoint_dir: Some(&a.ckpt_root),
        allow_training: a.train,
        eval_seed: a.seed,
        eval_batch: a.batch,
    })
    .map_err(|e| match e {
        diffloc_core::Error::MissingCheckpoint(p) => anyhow::anyhow!(
            "missing checkpoint {}; pass --train to train missing cells",
            p.display()
        ),
        e => e.into(),
    })?;
    print!("{}", report.to_text());
    write_outputs(
        &a.ckpt_root,
        &[("ablation.txt", report.to_text()), ("ablation.csv", report.to_csv())],
    )
}

fn attack(a: AttackArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt, &Device::Cpu)?;
    let (samples, data_seed) = load_dataset(&a.data)?;
    let grid: AttackGrid = match &a.grid {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing grid {}", p.display()))?,
        None => AttackGrid::default(),
    };
    let fp = ck.config.fingerprint(data_seed);
    let report = eval::run_robustness(
        &ck.model,
        &ck.config.schedule()?,
        &ck.config.sampler(),
        &samples,
        &grid,
        a.seed,
        a.batch,
        &fp,
    )?;
    print!("{}", report.to_text());
    write_outputs(
        &a.out,
        &[("robustness.txt", report.to_text()), ("robustness.csv", report.to_csv())],
    )?;
    eval::render_robustness_plot(&report, &a.out.join("robustness.png"))?;
    println!("curves and plot -> {}", a.out.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.size == 0 || !a.size.is_multiple_of(32) {
        bail!("--size must be a positive multiple of 32, got {}", a.size);
    }
    let samples = data::generate_synthetic(a.n, a.size, a.seed)?;
    data::export_folder(&samples, &a.out)?;
    let meta = DatasetMeta {
        seed: a.seed,
        n: a.n,
        size: a.size,
    };
    fs::write(a.out.join(DATASET_META), serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn partial_config_keeps_desk_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, r#"{"lr": 0.0005, "model": {"backbone": {"mlp_ratio": 2}}}"#).unwrap();
        let cfg = load_config(Some(&p)).unwrap();
        let desk = TrainConfig::desk();
        assert_eq!(cfg.lr, 0.0005);
        assert_eq!(cfg.batch_size, desk.batch_size);
        assert_eq!(cfg.epochs, desk.epochs);
        assert_eq!(cfg.model.backbone.mlp_ratio, 2);
        assert_eq!(cfg.model.backbone.channels, desk.model.backbone.channels);
    }

    #[test]
    fn grid_snapping() {
        let img = image::RgbImage::new(70, 100);
        assert_eq!(fit_to_grid(&img).dimensions(), (64, 96));
        let tiny = image::RgbImage::new(5, 5);
        assert_eq!(fit_to_grid(&tiny).dimensions(), (32, 32));
    }

    #[test]
    fn train_needs_a_data_source() {
        assert!(Cli::try_parse_from(["diffloc", "train"]).is_err());
        assert!(Cli::try_parse_from(["diffloc", "train", "--synthetic", "4"]).is_ok());
        assert!(
            Cli::try_parse_from(["diffloc", "train", "--synthetic", "4", "--data", "x"]).is_err()
        );
    }

    #[test]
    fn gen_data_writes_meta() {
        let dir = tempfile::tempdir().unwrap();
        gen_data(GenDataArgs {
            n: 3,
            size: 32,
            seed: 17,
            out: dir.path().to_path_buf(),
        })
        .unwrap();
        let (samples, seed) = load_dataset(dir.path()).unwrap();
        assert_eq!((samples.len(), seed), (3, 17));
    }
}
