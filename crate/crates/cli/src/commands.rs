//! One function per subcommand, plus the shared JSON/image plumbing.
//!
//! Artifact-producing commands write a `run.json` holding their fully
//! resolved configuration (defaults included) next to their outputs;
//! for `train` and `sweep` that file is itself a valid `--config`
//! input, so a saved run can be reproduced exactly.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ortho_mtl::autodiff::{Element, Precision, Tensor};
use ortho_mtl::checkpoint::{load_header, load_model};
use ortho_mtl::dataset::{
    self, correlation_matrix, equicorrelated, CorrKind, Dataset, GeneratorConfig,
};
use ortho_mtl::model::Model;
use ortho_mtl::peft::PeftKind;
use ortho_mtl::training::{
    evaluate, run_matrix, train as train_model, Augment, RunRecord, SweepConfig, SweepResult,
    TrainConfig,
};
use ortho_mtl::viz::heatmap::{activation_map, read_ppm, write_ppm};
use ortho_mtl::viz::report::{emit_report, write_ablation_csv};
use ortho_mtl::viz::{ActivationMap, ActivationTap};
use ortho_mtl::Task;

const ALL_TAPS: [ActivationTap; 3] = [ActivationTap::Down, ActivationTap::Norm, ActivationTap::Up];

// ── shared plumbing ──────────────────────────────────────────────────

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn parse_peft(name: &str) -> Result<PeftKind> {
    PeftKind::from_name(name)
        .ok_or_else(|| anyhow!("unknown PEFT kind {name:?} (expected adapter or lora)"))
}

fn parse_task(name: &str) -> Result<Task> {
    Task::from_name(name).ok_or_else(|| {
        anyhow!("unknown task {name:?} (expected steatosis, ballooning, or inflammation)")
    })
}

/// `[1, H, W, 3]` tensor from a row-major RGB slice in `[0, 1]`.
fn image_tensor<E: Element>(rgb: &[f32], width: usize, height: usize) -> Result<Tensor<E>> {
    let data: Vec<E> = rgb.iter().map(|&p| E::from_f64(p as f64)).collect();
    Ok(Tensor::from_vec(data, &[1, height, width, 3])?)
}

/// Resolve `--image <idx|file>`: an integer indexes into `--dataset`,
/// anything else is read as a binary PPM.
fn resolve_image(spec: &str, dataset: Option<&Dataset>) -> Result<(Vec<f32>, usize, usize)> {
    if let Ok(idx) = spec.parse::<usize>() {
        let ds = dataset
            .ok_or_else(|| anyhow!("--image {idx} is a dataset index; pass --dataset too"))?;
        let sample = ds
            .samples
            .get(idx)
            .ok_or_else(|| anyhow!("image index {idx} out of range (dataset has {})", ds.len()))?;
        return Ok((sample.image.clone(), ds.image_size, ds.image_size));
    }
    let (rgb, w, h) = read_ppm(Path::new(spec)).with_context(|| format!("reading image {spec}"))?;
    Ok((rgb, w, h))
}

/// Activation maps for every `(task, layer, tap)` combination.
fn adapter_maps<E: Element>(
    model: &Model<E>,
    image: &Tensor<E>,
    tasks: &[Task],
    layers: &[usize],
) -> Result<Vec<ActivationMap>> {
    let mut maps = Vec::new();
    for &task in tasks {
        for &layer in layers {
            for tap in ALL_TAPS {
                maps.push(activation_map(model, image, task, layer, tap)?);
            }
        }
    }
    Ok(maps)
}

// ── gen-data ─────────────────────────────────────────────────────────

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of samples
    #[arg(long, default_value_t = 3000)]
    n: usize,
    /// Master RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (written: manifest.json, images.bin, run.json)
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Target off-diagonal label correlation
    #[arg(long, default_value_t = 0.6)]
    corr: f64,
    /// Background texture amplitude
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        n_samples: args.n,
        image_size: args.image_size,
        target_corr: equicorrelated(args.corr),
        noise: args.noise,
        seed: args.seed,
        ..GeneratorConfig::default()
    };
    let ds = dataset::generate(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    dataset::save(&ds, &args.out)?;
    write_json(&args.out.join("run.json"), &cfg)?;

    let pearson = correlation_matrix(&ds.label_columns(), CorrKind::Pearson)?;
    println!(
        "wrote {} samples ({}x{} px) to {}",
        ds.len(),
        ds.image_size,
        ds.image_size,
        args.out.display()
    );
    println!(
        "label correlations (target {:.2}): st-ba {:.3}, st-in {:.3}, ba-in {:.3}",
        args.corr, pearson[0][1], pearson[0][2], pearson[1][2]
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (manifest.json + images.bin)
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (written: run.json, metrics.csv, ckpt.bin, record.json)
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding a full training config; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Orthogonality penalty weight
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Post-warmup learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// PEFT kind: adapter | lora
    #[arg(long)]
    peft: Option<String>,
    /// Bottleneck / low-rank dimension r
    #[arg(long)]
    rank: Option<usize>,
    /// Element precision: f32 | f64
    #[arg(long)]
    precision: Option<String>,
    /// Augmentation: none | flip | eightfold
    #[arg(long)]
    augment: Option<String>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lambda {
            cfg.objective.lambda = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(name) = &self.peft {
            cfg.model.peft.kind = parse_peft(name)?;
        }
        if let Some(v) = self.rank {
            cfg.model.peft.r = v;
        }
        if let Some(name) = &self.precision {
            cfg.precision = Precision::from_name(name)
                .ok_or_else(|| anyhow!("unknown precision {name:?} (expected f32 or f64)"))?;
        }
        if let Some(name) = &self.augment {
            cfg.augment = Augment::from_name(name).ok_or_else(|| {
                anyhow!("unknown augmentation {name:?} (expected none, flip, or eightfold)")
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_train<E: Element>(cfg: &TrainConfig, ds: &Dataset, out: &Path) -> Result<RunRecord> {
    let (_, record) = train_model::<E>(cfg, ds, Some(out))?;
    Ok(record)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset(&args.dataset)?;
    std::fs::create_dir_all(&args.out)?;
    // Capture the resolved config before the long run starts.
    write_json(&args.out.join("run.json"), &cfg)?;

    let record = match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, &ds, &args.out)?,
        Precision::F64 => run_train::<f64>(&cfg, &ds, &args.out)?,
    };
    write_json(&args.out.join("record.json"), &record)?;

    println!(
        "trained {} epochs (peft {}, lambda {}, seed {})",
        record.epochs_run, record.peft, record.lambda, record.seed
    );
    let tasks = &cfg.model.tasks;
    for (t, acc) in tasks.iter().zip(&record.best_val_acc) {
        println!("  val acc {t}: {acc:.4}");
    }
    println!(
        "  val acc mean: {:.4} (best at epoch {})",
        record.best_val_mean, record.best_epoch
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct SweepArgs {
    /// Dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory (written: run.json, sweep_results.json, ablation.csv)
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding a full sweep config; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated penalty weights, e.g. 0,0.01,0.1,1.0
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Comma-separated PEFT kinds, e.g. adapter,lora
    #[arg(long, value_delimiter = ',')]
    peft: Option<Vec<String>>,
    /// Number of seeds (runs use seeds 0..N)
    #[arg(long)]
    seeds: Option<u64>,
    /// Epochs per cell
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads; results are identical for any value
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl SweepArgs {
    fn resolve(&self) -> Result<SweepConfig> {
        let mut cfg: SweepConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => SweepConfig::default(),
        };
        if let Some(lambdas) = &self.lambda {
            cfg.lambdas = lambdas.clone();
        }
        if let Some(kinds) = &self.peft {
            cfg.peft_kinds = kinds.iter().map(|k| parse_peft(k)).collect::<Result<_>>()?;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = (0..n).collect();
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset(&args.dataset)?;
    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("run.json"), &cfg)?;

    let result = match cfg.train.precision {
        Precision::F32 => run_matrix::<f32>(&cfg, &ds, args.jobs)?,
        Precision::F64 => run_matrix::<f64>(&cfg, &ds, args.jobs)?,
    };
    write_json(&args.out.join("sweep_results.json"), &result)?;
    write_ablation_csv(&args.out.join("ablation.csv"), &result)?;

    println!(
        "{} cells over {} rows:",
        result.cells.len(),
        result.rows.len()
    );
    for row in &result.rows {
        let acc = match &row.mean_acc {
            Some(acc) => acc
                .iter()
                .map(|a| format!("{a:.4}"))
                .collect::<Vec<_>>()
                .join(" "),
            None => "-".into(),
        };
        println!(
            "  {:<7} lambda {:<6} [{acc}] {} ({}/{} seeds)",
            row.peft.to_string(),
            row.lambda,
            row.status,
            row.seeds_ok,
            row.seeds_total
        );
    }
    println!("artifacts in {}", args.out.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint produced by `train` (ckpt.bin)
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory to score
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Optional directory for run.json + eval.json (results always print)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalReport {
    ckpt: PathBuf,
    precision: Precision,
    n_samples: usize,
    tasks: Vec<Task>,
    accuracy: Vec<f64>,
    mean_accuracy: f64,
}

fn run_eval<E: Element>(ckpt: &Path, ds: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let model = load_model::<E>(ckpt)?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    Ok(evaluate(&model, ds, &indices, batch_size, None)?)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let header = load_header(&args.ckpt)
        .with_context(|| format!("reading checkpoint {}", args.ckpt.display()))?;
    let ds = load_dataset(&args.dataset)?;
    let accuracy = match header.precision {
        Precision::F32 => run_eval::<f32>(&args.ckpt, &ds, args.batch_size)?,
        Precision::F64 => run_eval::<f64>(&args.ckpt, &ds, args.batch_size)?,
    };
    let report = EvalReport {
        ckpt: args.ckpt.clone(),
        precision: header.precision,
        n_samples: ds.len(),
        tasks: header.model.tasks.clone(),
        mean_accuracy: accuracy.iter().sum::<f64>() / accuracy.len() as f64,
        accuracy,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("run.json"), &SerializedEvalArgs::from(args))?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SerializedEvalArgs {
    ckpt: PathBuf,
    dataset: PathBuf,
    batch_size: usize,
}

impl From<&EvalArgs> for SerializedEvalArgs {
    fn from(a: &EvalArgs) -> Self {
        SerializedEvalArgs {
            ckpt: a.ckpt.clone(),
            dataset: a.dataset.clone(),
            batch_size: a.batch_size,
        }
    }
}

// ── viz ──────────────────────────────────────────────────────────────

#[derive(Args)]
pub struct VizArgs {
    /// Adapter checkpoint produced by `train`
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset index (integer) or path to a binary PPM (P6) image
    #[arg(long)]
    image: String,
    /// Task name, or `all`
    #[arg(long, default_value = "all")]
    task: String,
    /// Adapter layer index; defaults to every insertion layer
    #[arg(long)]
    layer: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; needed when --image is an index
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Serialize)]
struct SerializedVizArgs {
    ckpt: PathBuf,
    image: String,
    tasks: Vec<Task>,
    layers: Vec<usize>,
}

fn run_viz<E: Element>(
    ckpt: &Path,
    rgb: &[f32],
    width: usize,
    height: usize,
    tasks: &[Task],
    layer: Option<usize>,
) -> Result<(Vec<ActivationMap>, Vec<usize>)> {
    let model = load_model::<E>(ckpt)?;
    let expect = model.backbone.config().image_size;
    if width != expect || height != expect {
        bail!("image is {width}x{height} but the model expects {expect}x{expect}");
    }
    let image = image_tensor::<E>(rgb, width, height)?;
    let layers: Vec<usize> = match layer {
        Some(l) => vec![l],
        None => model.backbone.config().branch_layers(),
    };
    let maps = adapter_maps(&model, &image, tasks, &layers)?;
    Ok((maps, layers))
}

pub fn viz(args: &VizArgs) -> Result<()> {
    let header = load_header(&args.ckpt)
        .with_context(|| format!("reading checkpoint {}", args.ckpt.display()))?;
    let ds = match &args.dataset {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let (rgb, width, height) = resolve_image(&args.image, ds.as_ref())?;
    let tasks: Vec<Task> = if args.task == "all" {
        header.model.tasks.clone()
    } else {
        vec![parse_task(&args.task)?]
    };

    let (maps, layers) = match header.precision {
        Precision::F32 => run_viz::<f32>(&args.ckpt, &rgb, width, height, &tasks, args.layer)?,
        Precision::F64 => run_viz::<f64>(&args.ckpt, &rgb, width, height, &tasks, args.layer)?,
    };

    std::fs::create_dir_all(&args.out)?;
    write_json(
        &args.out.join("run.json"),
        &SerializedVizArgs {
            ckpt: args.ckpt.clone(),
            image: args.image.clone(),
            tasks: tasks.clone(),
            layers,
        },
    )?;
    write_ppm(&args.out.join("input.ppm"), &rgb, width, height)?;
    let written = ortho_mtl::viz::report::write_heatmaps(&args.out, &maps)?;
    for (path, map) in written.iter().zip(&maps) {
        let note = if map.degenerate {
            " (degenerate: constant activation)"
        } else {
            ""
        };
        println!("{}{note}", path.display());
    }
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────

#[derive(Args)]
pub struct ReportArgs {
    /// Directory containing sweep_results.json (as written by `sweep`)
    #[arg(long)]
    runs: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory for the label-correlation audit
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Adapter checkpoint for activation heatmaps (needs --dataset)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset index of the heatmap probe image
    #[arg(long, default_value_t = 0)]
    image: usize,
}

#[derive(Serialize)]
struct SerializedReportArgs {
    runs: PathBuf,
    dataset: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    image: usize,
}

fn report_maps<E: Element>(
    ckpt: &Path,
    ds: &Dataset,
    image_idx: usize,
) -> Result<Vec<ActivationMap>> {
    let model = load_model::<E>(ckpt)?;
    let sample = ds.samples.get(image_idx).ok_or_else(|| {
        anyhow!(
            "image index {image_idx} out of range (dataset has {})",
            ds.len()
        )
    })?;
    let image = image_tensor::<E>(&sample.image, ds.image_size, ds.image_size)?;
    let last_layer = *model
        .backbone
        .config()
        .branch_layers()
        .last()
        .ok_or_else(|| anyhow!("model has no adapter layers"))?;
    adapter_maps(&model, &image, model.tasks(), &[last_layer])
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let results_path = args.runs.join("sweep_results.json");
    let result: SweepResult = read_json(&results_path)
        .with_context(|| "expected sweep_results.json as written by `ortho-mtl sweep`")?;
    let ds = match &args.dataset {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let maps = match (&args.ckpt, &ds) {
        (Some(ckpt), Some(ds)) => {
            let header = load_header(ckpt)?;
            match header.precision {
                Precision::F32 => report_maps::<f32>(ckpt, ds, args.image)?,
                Precision::F64 => report_maps::<f64>(ckpt, ds, args.image)?,
            }
        }
        (Some(_), None) => bail!("--ckpt heatmaps need --dataset for the probe image"),
        _ => Vec::new(),
    };

    std::fs::create_dir_all(&args.out)?;
    write_json(
        &args.out.join("run.json"),
        &SerializedReportArgs {
            runs: args.runs.clone(),
            dataset: args.dataset.clone(),
            ckpt: args.ckpt.clone(),
            image: args.image,
        },
    )?;
    let written = emit_report(&args.out, &result, ds.as_ref(), &maps)?;
    for path in &written {
        println!("{}", path.display());
    }
    Ok(())
}
