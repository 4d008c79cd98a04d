//! Command-line interface: dataset generation, training, sampling,
//! evaluation, benchmarking, and attention traces.
//!
//! Every tunable resolves in the same order: an explicit CLI flag wins,
//! then a `key=value` line from the `--config` file, then the built-in
//! default. Paths (datasets, checkpoints, outputs) are always given as
//! flags, never through the config file.
//!
//! Exit codes follow the usual convention: 0 on success, 2 for usage
//! errors (unknown flags, malformed values — reported by the parser on
//! stderr), 1 for runtime failures such as missing files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::{Mode, ParamStore};
use crate::dataset::{
    generate_synthetic, Dataset, DatasetItem, ShapeFamily, Split, DEFAULT_FRACTIONS,
    DEFAULT_SIGMA,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::sampler::sample;
use crate::tasknet::{TaskKind, TaskNetwork};
use crate::training::{
    evaluate, sample_once, train_sampler_joint, train_sampler_kd, train_sampler_supervised,
    train_task_net, EvalOptions, Method, Metrics, TrainConfig, Variant, DEFAULT_VOXEL_CELL,
};

/// Environment variable capping the worker-thread count. Unset means
/// hardware parallelism.
pub const THREADS_ENV: &str = "PTSAMPLE_THREADS";

/// Task-oriented point-cloud sampling toolkit.
#[derive(Debug, Parser)]
#[command(name = "ptsample", version, about)]
struct Cli {
    /// Plain-text `key=value` config file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset and write it to disk.
    GenData(GenDataArgs),
    /// Train a task network (classifier or autoencoder) on a dataset.
    TrainTask(TrainTaskArgs),
    /// Train the attention sampler against a frozen task network.
    TrainSampler(TrainSamplerArgs),
    /// Run one sampling method over a dataset and write the sampled clouds.
    Sample(SampleArgs),
    /// Evaluate task metrics for one or more sampling methods.
    Eval(EvalArgs),
    /// Evaluate with per-cloud timing (median over repeated passes).
    Bench(EvalArgs),
    /// Write one cloud's attention scores and coefficients as CSV.
    DumpAttention(DumpAttentionArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output dataset path (a sidecar JSON is written next to it).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Shape families to include, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_family)]
    classes: Option<Vec<ShapeFamily>>,
    /// Clouds generated per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Points per cloud.
    #[arg(long)]
    n: Option<usize>,
    /// Standard deviation of the Gaussian surface noise.
    #[arg(long)]
    sigma: Option<f64>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainTaskArgs {
    /// Input dataset path.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output checkpoint path for the trained network.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Which task head to train.
    #[arg(long, value_parser = parse_task_kind)]
    task: Option<TaskKind>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// RNG seed for initialization and batch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for periodic checkpoints.
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    /// Metric-log CSV path (a JSON summary is written next to it).
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainSamplerArgs {
    /// Input dataset path.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Frozen task-network checkpoint providing the training signal.
    #[arg(long, value_name = "FILE")]
    task_net: PathBuf,
    /// Output checkpoint path for the trained sampler parameters.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Training regime.
    #[arg(long, value_parser = parse_train_mode)]
    mode: Option<TrainMode>,
    /// Sample count for supervised and kd modes.
    #[arg(long)]
    m: Option<usize>,
    /// Sample counts for joint mode, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Expected task head; fails fast if the checkpoint disagrees.
    #[arg(long, value_parser = parse_task_kind)]
    task: Option<TaskKind>,
    /// Weight of the sampling loss in the total objective.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the max nearest-neighbor term.
    #[arg(long)]
    beta: Option<f64>,
    /// Constant part of the coverage-term weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Per-sample-count part of the coverage-term weight.
    #[arg(long)]
    delta: Option<f64>,
    /// Softening temperature for teacher distributions in kd mode.
    #[arg(long)]
    kd_temperature: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// RNG seed for initialization and batch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable recurrent-parameter gradient clipping.
    #[arg(long)]
    no_clip: bool,
    /// Directory for periodic checkpoints.
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    /// Metric-log CSV path (a JSON summary is written next to it).
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Input dataset path.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output dataset of sampled clouds (labels and splits carry over).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of points to keep per cloud.
    #[arg(long)]
    m: Option<usize>,
    /// Sampling method.
    #[arg(long, value_parser = parse_method_kind)]
    method: Option<MethodKind>,
    /// Learned-sampler checkpoint (required for --method apsnet).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Learned-sampler output form: g = generated, m = matched subset.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Index of the first point selected by farthest-point sampling.
    #[arg(long)]
    fps_start: Option<usize>,
    /// Base seed for random sampling (per-cloud seeds derive from it).
    #[arg(long)]
    seed: Option<u64>,
    /// Starting cell size for voxel-grid sampling.
    #[arg(long)]
    cell: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Input dataset path.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Task-network checkpoint providing the evaluation metric.
    #[arg(long, value_name = "FILE")]
    task_net: PathBuf,
    /// Metrics CSV output path (a JSON summary is written next to it).
    #[arg(long, value_name = "FILE")]
    metrics: PathBuf,
    /// Sample counts to evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Methods to evaluate, comma separated. Defaults to every method the
    /// given checkpoints allow.
    #[arg(long, value_delimiter = ',', value_parser = parse_method_kind)]
    methods: Option<Vec<MethodKind>>,
    /// Dataset split to evaluate on.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Learned-sampler checkpoint (required for the apsnet method).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Learned-sampler output form: g = generated, m = matched subset.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Index of the first point selected by farthest-point sampling.
    #[arg(long)]
    fps_start: Option<usize>,
    /// Base seed for random sampling (per-cloud seeds derive from it).
    #[arg(long)]
    seed: Option<u64>,
    /// Starting cell size for voxel-grid sampling.
    #[arg(long)]
    cell: Option<f64>,
    /// Timed passes per measurement (bench only).
    #[arg(long)]
    runs: Option<usize>,
    /// Untimed passes before the clock starts (bench only).
    #[arg(long)]
    warmups: Option<usize>,
}

#[derive(Debug, Args)]
struct DumpAttentionArgs {
    /// Input dataset path.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Learned-sampler checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of sampling steps to trace.
    #[arg(long)]
    m: Option<usize>,
    /// Index of the cloud to trace.
    #[arg(long)]
    index: Option<usize>,
}

/// Sampler training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrainMode {
    Supervised,
    Kd,
    Joint,
}

impl TrainMode {
    fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Kd => "kd",
            TrainMode::Joint => "joint",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TrainMode::Supervised),
            "kd" => Ok(TrainMode::Kd),
            "joint" => Ok(TrainMode::Joint),
            other => Err(Error::invalid_argument(format!(
                "unknown mode '{other}' (expected supervised, kd, or joint)"
            ))),
        }
    }
}

/// Named sampling method, before checkpoints and options are attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MethodKind {
    Apsnet,
    Fps,
    Random,
    Voxel,
}

impl MethodKind {
    /// Human-readable label used in metric names and progress output.
    fn label(&self, variant: Variant) -> &'static str {
        match (self, variant) {
            (MethodKind::Apsnet, Variant::Generate) => "apsnet-g",
            (MethodKind::Apsnet, Variant::Match) => "apsnet-m",
            (MethodKind::Fps, _) => "fps",
            (MethodKind::Random, _) => "random",
            (MethodKind::Voxel, _) => "voxel",
        }
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apsnet" => Ok(MethodKind::Apsnet),
            "fps" => Ok(MethodKind::Fps),
            "random" => Ok(MethodKind::Random),
            "voxel" => Ok(MethodKind::Voxel),
            other => Err(Error::invalid_argument(format!(
                "unknown method '{other}' (expected apsnet, fps, random, or voxel)"
            ))),
        }
    }
}

// Free-function wrappers so clap value parsers stay plain `fn` items.
fn parse_family(s: &str) -> Result<ShapeFamily> {
    s.parse()
}

fn parse_task_kind(s: &str) -> Result<TaskKind> {
    s.parse()
}

fn parse_train_mode(s: &str) -> Result<TrainMode> {
    s.parse()
}

fn parse_method_kind(s: &str) -> Result<MethodKind> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<Variant> {
    s.parse()
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

/// Keys the config file may set. Anything else is rejected so typos fail
/// loudly instead of silently falling back to defaults.
const KNOWN_KEYS: &[&str] = &[
    "batch", "beta", "cell", "classes", "clip", "delta", "epochs", "fps-start", "gamma", "index",
    "kd-temperature", "lambda", "lr", "m", "method", "methods", "mode", "n", "per-class", "runs",
    "seed", "sigma", "sizes", "split", "task", "variant", "warmups",
];

/// Parsed `key=value` config file. Blank lines and `#` comments are
/// skipped; keys use the same spelling as the long flags.
#[derive(Debug, Default)]
struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid_argument(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::invalid_argument(format!(
                    "{}:{}: unknown config key '{key}'",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::invalid_argument(format!("config key '{key}': {e}"))
            }),
        }
    }

    fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|part| {
                    part.trim().parse::<T>().map_err(|e| {
                        Error::invalid_argument(format!("config key '{key}': {e}"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

/// CLI flag if present, else config-file value, else nothing.
fn resolve_opt<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

/// CLI flag if present, else config-file value, else the default.
fn resolve<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T>
where
    T::Err: fmt::Display,
{
    Ok(resolve_opt(flag, file, key)?.unwrap_or(default))
}

/// CLI flag if present, else config-file value; error when neither.
fn resolve_required<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    resolve_opt(flag, file, key)?
        .ok_or_else(|| Error::invalid_argument(format!("missing required option --{key}")))
}

/// Like `resolve_opt` for comma-separated list flags.
fn resolve_list<T: FromStr>(
    flag: Option<Vec<T>>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<Vec<T>>>
where
    T::Err: fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get_list(key),
    }
}

/// Cap the global worker pool when the environment asks for it.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.parse().map_err(|_| {
        Error::invalid_argument(format!(
            "{THREADS_ENV} must be a positive integer, got '{raw}'"
        ))
    })?;
    if threads == 0 {
        return Err(Error::invalid_argument(format!(
            "{THREADS_ENV} must be a positive integer, got '{raw}'"
        )));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::invalid_state(format!("worker pool setup failed: {e}")))
}

/// Parse the command line and run the selected subcommand.
///
/// The parser itself exits with code 2 on usage errors; every error
/// returned from here is a runtime failure the binary maps to exit 1.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &file),
        Command::TrainTask(a) => cmd_train_task(a, &file),
        Command::TrainSampler(a) => cmd_train_sampler(a, &file),
        Command::Sample(a) => cmd_sample(a, &file),
        Command::Eval(a) => cmd_eval(a, &file, false),
        Command::Bench(a) => cmd_eval(a, &file, true),
        Command::DumpAttention(a) => cmd_dump_attention(a, &file),
    }
}

fn base_config(kind: TaskKind) -> TrainConfig {
    match kind {
        TaskKind::Classification => TrainConfig::classification(),
        TaskKind::Reconstruction => TrainConfig::reconstruction(),
    }
}

/// Apply the shared epochs/batch/lr/seed overrides onto a base config.
fn apply_overrides(
    cfg: &mut TrainConfig,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    file: &FileConfig,
) -> Result<()> {
    if let Some(v) = resolve_opt(epochs, file, "epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = resolve_opt(batch, file, "batch")? {
        cfg.batch_size = v;
    }
    if let Some(v) = resolve_opt(lr, file, "lr")? {
        cfg.lr = v;
    }
    if let Some(v) = resolve_opt(seed, file, "seed")? {
        cfg.seed = v;
    }
    Ok(())
}

/// Write the metric log as CSV plus a JSON summary next to it.
fn write_metrics(metrics: &Metrics, path: Option<&Path>) -> Result<()> {
    let Some(path) = path else {
        return Ok(());
    };
    metrics.save_csv(path)?;
    let summary = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        path.with_extension("summary.json")
    } else {
        path.with_extension("json")
    };
    metrics.save_summary(&summary)?;
    println!("metrics: {}", path.display());
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, file: &FileConfig) -> Result<()> {
    let classes = resolve_list(a.classes, file, "classes")?
        .unwrap_or_else(|| ShapeFamily::ALL.to_vec());
    let mut names: Vec<&str> = classes.iter().map(|f| f.name()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != classes.len() {
        return Err(Error::invalid_argument(
            "duplicate entries in --classes".to_string(),
        ));
    }
    let per_class = resolve(a.per_class, file, "per-class", 50)?;
    let n = resolve(a.n, file, "n", 128)?;
    let sigma = resolve(a.sigma, file, "sigma", DEFAULT_SIGMA)?;
    let seed = resolve(a.seed, file, "seed", 0)?;

    let ds = generate_synthetic(&classes, per_class, n, sigma, seed, DEFAULT_FRACTIONS)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} clouds ({} classes x {}, {} points each) to {}",
        ds.items.len(),
        classes.len(),
        per_class,
        n,
        a.out.display()
    );
    Ok(())
}

fn cmd_train_task(a: TrainTaskArgs, file: &FileConfig) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let kind = resolve(a.task, file, "task", TaskKind::Classification)?;
    let mut cfg = base_config(kind);
    apply_overrides(&mut cfg, a.epochs, a.batch, a.lr, a.seed, file)?;
    cfg.checkpoint_dir = a.checkpoint_dir;

    let (net, metrics) = train_task_net(&ds, kind, &cfg)?;
    net.save(&a.out)?;
    write_metrics(&metrics, a.metrics.as_deref())?;
    println!(
        "trained {} network for {} epochs; checkpoint: {}",
        kind.as_str(),
        cfg.epochs,
        a.out.display()
    );
    Ok(())
}

fn cmd_train_sampler(a: TrainSamplerArgs, file: &FileConfig) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let teacher = TaskNetwork::load(&a.task_net)?;
    if let Some(kind) = resolve_opt(a.task, file, "task")? {
        if kind != teacher.kind {
            return Err(Error::invalid_argument(format!(
                "--task {} does not match the {} head in {}",
                kind.as_str(),
                teacher.kind.as_str(),
                a.task_net.display()
            )));
        }
    }
    let mode = resolve_required(a.mode, file, "mode")?;

    let mut cfg = base_config(teacher.kind);
    apply_overrides(&mut cfg, a.epochs, a.batch, a.lr, a.seed, file)?;
    if let Some(v) = resolve_opt(a.lambda, file, "lambda")? {
        cfg.loss.lambda = v;
    }
    if let Some(v) = resolve_opt(a.beta, file, "beta")? {
        cfg.loss.beta = v;
    }
    if let Some(v) = resolve_opt(a.gamma, file, "gamma")? {
        cfg.loss.gamma = v;
    }
    if let Some(v) = resolve_opt(a.delta, file, "delta")? {
        cfg.loss.delta = v;
    }
    if let Some(v) = resolve_opt(a.kd_temperature, file, "kd-temperature")? {
        cfg.kd_temperature = v;
    }
    if a.no_clip || file.get::<bool>("clip")? == Some(false) {
        cfg.clip_norm = None;
    }
    cfg.checkpoint_dir = a.checkpoint_dir;

    let run = match mode {
        TrainMode::Supervised => {
            let m = resolve_required(a.m, file, "m")?;
            train_sampler_supervised(&ds, &teacher, m, &cfg)?
        }
        TrainMode::Kd => {
            let m = resolve_required(a.m, file, "m")?;
            // Distillation sees geometry only: keep the training clouds
            // and drop the labels before they can reach the trainer.
            let clouds: Vec<PointCloud> = ds
                .split_indices(Split::Train)
                .into_iter()
                .map(|i| ds.items[i].cloud.clone())
                .collect();
            train_sampler_kd(&clouds, &teacher, m, &cfg)?
        }
        TrainMode::Joint => {
            let sizes = resolve_list(a.sizes, file, "sizes")?.ok_or_else(|| {
                Error::invalid_argument("missing required option --sizes".to_string())
            })?;
            train_sampler_joint(&ds, &teacher, &sizes, &cfg)?
        }
    };
    run.params.save(&a.out)?;
    write_metrics(&run.metrics, a.metrics.as_deref())?;
    println!(
        "trained sampler ({}) for {} epochs; checkpoint: {}",
        mode.as_str(),
        cfg.epochs,
        a.out.display()
    );
    Ok(())
}

/// Sampling options that do not depend on a checkpoint.
struct MethodOptions {
    variant: Variant,
    fps_start: usize,
    seed: u64,
    cell: f64,
}

impl MethodOptions {
    fn resolve(
        variant: Option<Variant>,
        fps_start: Option<usize>,
        seed: Option<u64>,
        cell: Option<f64>,
        file: &FileConfig,
    ) -> Result<MethodOptions> {
        Ok(MethodOptions {
            variant: resolve(variant, file, "variant", Variant::Generate)?,
            fps_start: resolve(fps_start, file, "fps-start", 0)?,
            seed: resolve(seed, file, "seed", 0)?,
            cell: resolve(cell, file, "cell", DEFAULT_VOXEL_CELL)?,
        })
    }
}

/// Attach checkpoints and options to a method name.
fn build_method<'a>(
    kind: MethodKind,
    opts: &MethodOptions,
    store: Option<&'a ParamStore>,
) -> Result<Method<'a>> {
    Ok(match kind {
        MethodKind::Apsnet => Method::Learned {
            store: store.ok_or_else(|| {
                Error::invalid_argument(
                    "method apsnet needs a sampler checkpoint (--checkpoint)".to_string(),
                )
            })?,
            variant: opts.variant,
        },
        MethodKind::Fps => Method::Fps {
            start: opts.fps_start,
        },
        MethodKind::Random => Method::Random { seed: opts.seed },
        MethodKind::Voxel => Method::Voxel {
            initial_cell: opts.cell,
        },
    })
}

fn cmd_sample(a: SampleArgs, file: &FileConfig) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let m = resolve_required(a.m, file, "m")?;
    let kind = resolve_required(a.method, file, "method")?;
    let opts = MethodOptions::resolve(a.variant, a.fps_start, a.seed, a.cell, file)?;
    let store = match &a.checkpoint {
        Some(path) => Some(ParamStore::load(path)?),
        None => None,
    };
    let method = build_method(kind, &opts, store.as_ref())?;

    let mut items = Vec::with_capacity(ds.items.len());
    for (i, it) in ds.items.iter().enumerate() {
        let points = sample_once(&method, &it.cloud, m, i as u64)?;
        items.push(DatasetItem {
            cloud: PointCloud::new(points)?,
            label: it.label,
            split: it.split,
        });
    }
    let out_ds = Dataset {
        items,
        class_names: ds.class_names.clone(),
    };
    out_ds.save(&a.out)?;
    println!(
        "sampled {} clouds down to {} points each ({}); wrote {}",
        out_ds.items.len(),
        m,
        kind.label(opts.variant),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, file: &FileConfig, timed: bool) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let teacher = TaskNetwork::load(&a.task_net)?;
    let sizes = resolve_list(a.sizes, file, "sizes")?.ok_or_else(|| {
        Error::invalid_argument("missing required option --sizes".to_string())
    })?;
    let split = resolve(a.split, file, "split", Split::Test)?;
    let opts = MethodOptions::resolve(a.variant, a.fps_start, a.seed, a.cell, file)?;
    let store = match &a.checkpoint {
        Some(path) => Some(ParamStore::load(path)?),
        None => None,
    };
    let methods = resolve_list(a.methods, file, "methods")?.unwrap_or_else(|| {
        let mut all = vec![MethodKind::Fps, MethodKind::Random, MethodKind::Voxel];
        if store.is_some() {
            all.insert(0, MethodKind::Apsnet);
        }
        all
    });
    let eval_opts = if timed {
        EvalOptions {
            timing_runs: resolve(a.runs, file, "runs", EvalOptions::timed().timing_runs)?,
            warmups: resolve(a.warmups, file, "warmups", EvalOptions::timed().warmups)?,
        }
    } else {
        EvalOptions::default()
    };

    let mut all = Metrics::new();
    for kind in methods {
        let method = build_method(kind, &opts, store.as_ref())?;
        let label = kind.label(opts.variant);
        let mut rows = evaluate(&method, &teacher, &ds, split, &sizes, &eval_opts)?;
        for row in &mut rows.rows {
            row.metric = format!("{}:{label}", row.metric);
            match row.m {
                Some(m) => println!("  {} m={} {:.6}", row.metric, m, row.value),
                None => println!("  {} {:.6}", row.metric, row.value),
            }
        }
        all.extend(rows);
    }
    write_metrics(&all, Some(&a.metrics))?;
    Ok(())
}

fn cmd_dump_attention(a: DumpAttentionArgs, file: &FileConfig) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let store = ParamStore::load(&a.checkpoint)?;
    let m = resolve_required(a.m, file, "m")?;
    let index = resolve(a.index, file, "index", 0)?;
    let item = ds.items.get(index).ok_or_else(|| {
        Error::invalid_argument(format!(
            "cloud index {index} out of range (dataset has {} clouds)",
            ds.items.len()
        ))
    })?;

    let (_, trace) = sample(&item.cloud, &store, m, Mode::Eval)?;
    fs::write(&a.out, trace.to_csv())
        .map_err(|e| Error::io(a.out.display().to_string(), e))?;
    println!(
        "wrote attention trace for cloud {index} ({m} steps) to {}",
        a.out.display()
    );
    Ok(())
}
