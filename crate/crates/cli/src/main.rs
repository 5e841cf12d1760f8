//! `bnnkit` command-line front end.
//!
//! Every run prints one JSON summary line on stdout; logs go to stderr
//! (level from `BNNKIT_LOG`, default `info`). Exit codes: 0 success,
//! 2 usage, 3 I/O, 4 model or format.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bnnkit::compile::{compile_model_with_warnings, CompiledModel, MAGIC};
use bnnkit::data::{self, ConfusionMatrix, ConfusionReport, Dataset, Image, Manifest, Split, CLASS_NAMES};
use bnnkit::engine;
use bnnkit::gradcam;
use bnnkit::netspec::{Arch, NetworkSpec};
use bnnkit::par::Execution;
use bnnkit::perfmodel::{pipeline_report, suggest_folding, FoldingConfig};
use bnnkit::train::{self, TrainConfig, TrainedModel};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "bnnkit", version, about = "Binary neural network toolkit")]
struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run batch work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Fold a checkpoint into a BCOP model file.
    Compile(CompileArgs),
    /// Classify images with a compiled model.
    Infer(InferArgs),
    /// Confusion matrix and metrics on a dataset.
    Eval(EvalArgs),
    /// Cycle/throughput report for a folding.
    Bench(BenchArgs),
    /// Search a folding under PE/SIMD budgets.
    Dse(DseArgs),
    /// Grad-CAM overlays for images.
    Gradcam(GradcamArgs),
}

#[derive(Args, Debug)]
struct NetArgs {
    /// cnv, n-cnv or u-cnv.
    #[arg(long, default_value = "n-cnv")]
    arch: String,
    /// Network description JSON; overrides --arch.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Manifest CSV (path,label,split) or a class-per-directory dataset root.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Use the synthetic quadrant corpus with this many images per class.
    #[arg(long)]
    synth: Option<usize>,
    /// Split to read from a manifest.
    #[arg(long)]
    split: Option<String>,
    /// Downsample every class to the smallest one.
    #[arg(long)]
    balance: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    augment: bool,
    /// Checkpoint path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// BCOP model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// BCOP model or training checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Confusion-matrix JSON output.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 100.0)]
    clock_mhz: f64,
    /// Folding JSON; defaults to the built-in dimensioning of --arch.
    #[arg(long)]
    folding: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DseArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 100.0)]
    clock_mhz: f64,
    /// Total PEs over all weighted layers; defaults to the built-in folding's total.
    #[arg(long)]
    pe_budget: Option<usize>,
    /// Total SIMD lanes over all weighted layers.
    #[arg(long)]
    simd_budget: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    /// Training checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Explain this class instead of the predicted one.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = gradcam::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bnnkit::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use bnnkit::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::UnknownArch(_) | E::ClassOutOfRange(_) => 2,
                E::Io { .. } => 3,
                E::Image { path, .. } if !path.exists() => 3,
                E::Csv(c) if c.is_io_error() => 3,
                _ => 4,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("BNNKIT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let name = command_name(&cli.command);
    match run(&cli) {
        Ok(mut summary) => {
            summary["command"] = json!(name);
            summary["seed"] = json!(cli.seed);
            summary["status"] = json!("ok");
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            let code = e.exit_code();
            println!(
                "{}",
                json!({"command": name, "seed": cli.seed, "status": "error", "exit_code": code, "error": e.to_string()})
            );
            ExitCode::from(code)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Compile(_) => "compile",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Bench(_) => "bench",
        Command::Dse(_) => "dse",
        Command::Gradcam(_) => "gradcam",
    }
}

fn run(cli: &Cli) -> CliResult<Value> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Auto
    };
    log::info!("seed {}", cli.seed);
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed, exec),
        Command::Compile(a) => cmd_compile(a),
        Command::Infer(a) => cmd_infer(a, exec),
        Command::Eval(a) => cmd_eval(a, cli.seed, exec),
        Command::Bench(a) => cmd_bench(a),
        Command::Dse(a) => cmd_dse(a),
        Command::Gradcam(a) => cmd_gradcam(a),
    }
}

fn load_spec(net: &NetArgs) -> CliResult<NetworkSpec> {
    match &net.spec {
        Some(p) => Ok(NetworkSpec::load(p)?),
        None => Ok(NetworkSpec::builtin(Arch::parse(&net.arch)?)),
    }
}

fn clock_hz(mhz: f64) -> CliResult<f64> {
    if mhz > 0.0 && mhz.is_finite() {
        Ok(mhz * 1e6)
    } else {
        Err(CliError::Usage(format!("--clock-mhz must be positive, got {mhz}")))
    }
}

fn load_dataset(d: &DataArgs, seed: u64, default_split: Split) -> CliResult<Dataset> {
    if let Some(n) = d.synth {
        if n == 0 {
            return Err(CliError::Usage("--synth needs at least one image per class".into()));
        }
        let stream = match default_split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        return Ok(data::synth_quadrant_dataset(n, data::derive_seed(seed, &[stream])));
    }
    let path = d
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("one of --data or --synth is required".into()))?;
    let mut manifest = if path.is_dir() {
        let scan = data::build_manifest(path)?;
        for w in &scan.warnings {
            log::warn!("{w}");
        }
        scan.manifest
    } else {
        Manifest::load(path)?
    };
    if d.balance {
        manifest = data::balance(&manifest, seed)?;
    }
    let split = match &d.split {
        Some(s) => Some(Split::parse(s).ok_or_else(|| CliError::Usage(format!("unknown split `{s}`")))?),
        None if manifest.records.iter().any(|r| r.split == default_split) => Some(default_split),
        None => None,
    };
    let ds = Dataset::from_manifest(&manifest, split)?;
    log::info!("{} images, class counts {:?}", ds.len(), ds.class_counts(4));
    Ok(ds)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| {
        bnnkit::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn cmd_train(a: &TrainArgs, seed: u64, exec: Execution) -> CliResult<Value> {
    let spec = load_spec(&a.net)?;
    let data = load_dataset(&a.data, seed, Split::Train)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed,
        augment: a.augment,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut trainer = train::Trainer::new(TrainedModel::init(&spec, seed)?, config)?;
    trainer.exec = exec;
    let mut history = Vec::new();
    for _ in 0..a.epochs {
        let m = trainer.train_epoch(&data)?;
        log::info!("epoch {} loss {:.4} accuracy {:.4}", m.epoch, m.loss, m.accuracy);
        history.push(m);
    }
    trainer.model.save(&a.out)?;
    let last = history.last().expect("at least one epoch");
    Ok(json!({
        "arch": spec.arch_name,
        "checkpoint": a.out,
        "epochs": a.epochs,
        "samples": data.len(),
        "loss": last.loss,
        "train_accuracy": last.accuracy,
    }))
}

fn cmd_compile(a: &CompileArgs) -> CliResult<Value> {
    let trained = TrainedModel::load(&a.model)?;
    let (model, warnings) = compile_model_with_warnings(&trained, &trained.spec)?;
    model.save(&a.out)?;
    Ok(json!({
        "arch": model.arch_name,
        "model": a.out,
        "layers": model.layers.len(),
        "bytes": model.to_bytes().len(),
        "warnings": warnings.iter().map(|w| format!("{} channel {}: {}", w.layer, w.channel, w.message)).collect::<Vec<_>>(),
    }))
}

fn load_images(paths: &[PathBuf]) -> CliResult<Vec<Image>> {
    paths.iter().map(|p| Ok(Image::load(p)?)).collect()
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| c.to_string(), |s| s.to_string())
}

fn cmd_infer(a: &InferArgs, exec: Execution) -> CliResult<Value> {
    let model = CompiledModel::load(&a.model)?;
    let images = load_images(&a.images)?;
    let results = engine::classify_batch(&model, &images, exec)?;
    let rows: Vec<Value> = a
        .images
        .iter()
        .zip(&results)
        .map(|(p, (c, logits))| json!({"image": p, "class": c, "label": class_name(*c), "logits": logits}))
        .collect();
    Ok(json!({"model": a.model, "results": rows}))
}

fn is_compiled(path: &Path) -> CliResult<bool> {
    let bytes = std::fs::read(path).map_err(|e| bnnkit::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(bytes.starts_with(MAGIC))
}

fn cmd_eval(a: &EvalArgs, seed: u64, exec: Execution) -> CliResult<Value> {
    let compiled = is_compiled(&a.model)?;
    let data = load_dataset(&a.data, seed, Split::Test)?;
    let preds: Vec<usize> = if compiled {
        let model = CompiledModel::load(&a.model)?;
        engine::classify_batch(&model, &data.images, exec)?
            .into_iter()
            .map(|(c, _)| c)
            .collect()
    } else {
        let model = TrainedModel::load(&a.model)?;
        train::predict(&model, &data.images, 128)?
    };
    let mut m = ConfusionMatrix::new(4);
    for (&t, &p) in data.labels.iter().zip(&preds) {
        m.record(t, p);
    }
    let report = ConfusionReport::new(m)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(json!({
        "model": a.model,
        "engine": if compiled { "compiled" } else { "latent" },
        "samples": report.metrics.total,
        "accuracy": report.metrics.accuracy,
        "confusion": report.matrix,
    }))
}

fn cmd_bench(a: &BenchArgs) -> CliResult<Value> {
    let spec = load_spec(&a.net)?;
    let folding = match &a.folding {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| bnnkit::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| bnnkit::Error::Json {
                path: p.clone(),
                source: e,
            })?
        }
        None => FoldingConfig::builtin(Arch::parse(&a.net.arch)?),
    };
    let report = pipeline_report(&spec, &folding, clock_hz(a.clock_mhz)?)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(json!({"report": report}))
}

fn cmd_dse(a: &DseArgs) -> CliResult<Value> {
    let spec = load_spec(&a.net)?;
    let reference = Arch::parse(&a.net.arch).ok().map(FoldingConfig::builtin);
    let budget = |given: Option<usize>, total: fn(&FoldingConfig) -> usize, flag: &str| {
        given
            .or_else(|| reference.as_ref().filter(|f| f.validate(&spec).is_ok()).map(total))
            .ok_or_else(|| CliError::Usage(format!("--{flag} is required for this network")))
    };
    let pe = budget(a.pe_budget, FoldingConfig::total_pe, "pe-budget")?;
    let simd = budget(a.simd_budget, FoldingConfig::total_simd, "simd-budget")?;
    let folding = suggest_folding(&spec, pe, simd)?;
    let report = pipeline_report(&spec, &folding, clock_hz(a.clock_mhz)?)?;
    if let Some(out) = &a.out {
        write_json(out, &json!({"folding": folding, "report": report}))?;
    }
    Ok(json!({"pe_budget": pe, "simd_budget": simd, "folding": folding, "report": report}))
}

fn cmd_gradcam(a: &GradcamArgs) -> CliResult<Value> {
    let model = TrainedModel::load(&a.model)?;
    if let Some(c) = a.class {
        if c >= model.spec.classes {
            return Err(CliError::Usage(format!("--class {c} out of range")));
        }
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| bnnkit::Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let images = load_images(&a.images)?;
    let predicted = train::predict(&model, &images, 64)?;
    let mut entries = Vec::new();
    for (i, (path, image)) in a.images.iter().zip(&images).enumerate() {
        let class = a.class.unwrap_or(predicted[i]);
        let heatmap = gradcam::grad_cam(&model, image, class)?;
        let stem = path.file_stem().map_or_else(|| format!("image{i}"), |s| s.to_string_lossy().into_owned());
        let out = a.out_dir.join(format!("{i:04}_{stem}_cam.png"));
        gradcam::overlay(&heatmap, image, a.alpha, &out)?;
        entries.push(json!({
            "image": path,
            "overlay": out,
            "class": class,
            "predicted": predicted[i],
            "raw": heatmap.raw,
            "raw_shape": [heatmap.raw_height, heatmap.raw_width],
        }));
    }
    let manifest = a.out_dir.join("gradcam.json");
    write_json(&manifest, &entries)?;
    Ok(json!({"model": a.model, "overlays": entries.len(), "manifest": manifest}))
}
