//! Command-line front end: `run`, `eval`, `plot` and `export-features`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adapters::{Mode, ModelConfig, ModelState};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{
    centroid_cosine_distances, ece, evaluate_step, future_task_accuracy, phndd_average,
    phndd_protocol, posterior_centroids, DetectionMetrics, PhnddRow,
};
use crate::feature_provider::{
    build_task_stream, load_feature_store, save_feature_store, synth_stream, FeatureStore,
    SynthSpec, TaskStream,
};
use crate::memory::{Budget, MemoryBuffer, ScoreOrder, SelectionPolicy};
use crate::objectives::PriorKind;
use crate::trainer::{
    load_checkpoint, run_experiment_with, save_checkpoint, MemoryConfig, MetricsConfig,
    MetricsReport, RunConfig, StepReport, TrainConfig,
};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "PROBADAPT_OUTPUT_ROOT";
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

const RESULTS_FILE: &str = "results.json";
const CHECKPOINT_DIR: &str = "checkpoint";
const MEMORY_FILE: &str = "memory.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synth(SynthSpec),
    Store {
        path: PathBuf,
        num_tasks: usize,
        /// Class-order shuffle; `None` keeps store order.
        shuffle_seed: Option<u64>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(FeatureStore, TaskStream)> {
        match self {
            DataSource::Synth(spec) => synth_stream(spec),
            DataSource::Store {
                path,
                num_tasks,
                shuffle_seed,
            } => {
                let store = load_feature_store(path)?;
                let stream = build_task_stream(&store, *num_tasks, *shuffle_seed)?;
                Ok((store, stream))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Derived from the feature width when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn resolve(&self, dim: usize) -> Result<RunConfig> {
        let model = self.model.unwrap_or_else(|| ModelConfig::for_dim(dim));
        ensure!(
            model.vga.dim == dim,
            Config,
            "model dim {} does not match feature dim {dim}",
            model.vga.dim
        );
        let run = RunConfig {
            model,
            train: self.train,
            memory: self.memory,
            metrics: self.metrics,
        };
        run.validate()?;
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    /// Model configuration actually used.
    pub model: ModelConfig,
    pub class_order: Vec<u32>,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub test_sizes: Vec<usize>,
    pub metrics: MetricsReport,
    pub steps: Vec<StepReport>,
    pub memory: MemoryBuffer,
    /// Pairwise cosine distances between class posterior centroids.
    #[serde(default)]
    pub centroid_distances: Option<Vec<Vec<f64>>>,
}

impl ResultsFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let results: ResultsFile = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.into(),
            message: e.to_string(),
        })?;
        if results.schema_version != RESULTS_SCHEMA_VERSION {
            return Err(Error::Manifest {
                path: path.into(),
                message: format!("unsupported results schema {}", results.schema_version),
            });
        }
        Ok(results)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "probadapt",
    version,
    about = "Class-incremental learning with probabilistic adapters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a task stream and write results, checkpoint and memory.
    Run(RunArgs),
    /// Evaluate a saved run's checkpoint.
    Eval(EvalArgs),
    /// Render accuracy curves and centroid heatmaps as SVG.
    Plot(PlotArgs),
    /// Write a synthetic feature store in the on-disk format.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Herding,
    Random,
    Entropy,
    Variance,
    Energy,
}

impl From<PolicyArg> for SelectionPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Herding => SelectionPolicy::Herding,
            PolicyArg::Random => SelectionPolicy::Random,
            PolicyArg::Entropy => SelectionPolicy::Entropy,
            PolicyArg::Variance => SelectionPolicy::Variance,
            PolicyArg::Energy => SelectionPolicy::Energy,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PriorArg {
    Static,
    DataDriven,
    LanguageAware,
}

impl From<PriorArg> for PriorKind {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::Static => PriorKind::Static,
            PriorArg::DataDriven => PriorKind::DataDriven,
            PriorArg::LanguageAware => PriorKind::LanguageAware,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generate a synthetic stream.
    #[arg(long, conflicts_with = "store")]
    pub synth: bool,
    /// Feature store directory.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub classes_per_task: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub template_jitter: Option<f64>,
    /// Seed for training and, unless `--data-seed` is given, data generation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Class-order shuffle seed for stores.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: SynthArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Monte-Carlo samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub consolidation_epochs: Option<usize>,
    #[arg(long)]
    pub no_replay: bool,
    #[arg(long, value_enum)]
    pub memory_policy: Option<PolicyArg>,
    /// Fixed memory budget (total exemplars).
    #[arg(long, conflicts_with = "per_class_memory")]
    pub memory_budget: Option<usize>,
    /// Expandable memory, exemplars per class.
    #[arg(long)]
    pub per_class_memory: Option<usize>,
    /// Pick least-uncertain samples first for score-based policies.
    #[arg(long)]
    pub ascending_scores: bool,
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,
    /// Mean-only adapters without sampling.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub phndd: bool,
    #[arg(long)]
    pub transfer: bool,
    /// Results directory; defaults to `$PROBADAPT_OUTPUT_ROOT/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `run`.
    pub run_dir: PathBuf,
    /// Checkpoint to evaluate instead of the run's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Feature store to evaluate on instead of the run's data source.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub phndd: bool,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// One or more results files (or run directories).
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: SynthArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn synth_from(args: &SynthArgs, base: SynthSpec) -> SynthSpec {
    SynthSpec {
        num_tasks: args.tasks.unwrap_or(base.num_tasks),
        classes_per_task: args.classes_per_task.unwrap_or(base.classes_per_task),
        samples_per_class: args.samples_per_class.unwrap_or(base.samples_per_class),
        dim: args.dim.unwrap_or(base.dim),
        cluster_spread: args.spread.unwrap_or(base.cluster_spread),
        template_jitter: args.template_jitter.unwrap_or(base.template_jitter),
        seed: args.data_seed.or(args.seed).unwrap_or(base.seed),
        ..base
    }
}

/// Merges an optional config file with command-line overrides.
pub fn experiment_from_args(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| Error::Manifest {
                path: path.clone(),
                message: e.to_string(),
            })?
        }
        None => {
            let d = &args.data;
            let data = if let Some(path) = &d.store {
                DataSource::Store {
                    path: path.clone(),
                    num_tasks: d.tasks.unwrap_or(10),
                    shuffle_seed: d.shuffle_seed.or(Some(1993)),
                }
            } else if d.synth {
                DataSource::Synth(synth_from(d, SynthSpec::default()))
            } else {
                return Err(Error::Config(
                    "choose a data source with --synth or --store".into(),
                ));
            };
            ExperimentConfig {
                data,
                model: None,
                train: TrainConfig::default(),
                memory: MemoryConfig::default(),
                metrics: MetricsConfig::default(),
                output_dir: None,
            }
        }
    };
    if args.config.is_some() {
        match &mut cfg.data {
            DataSource::Synth(spec) => *spec = synth_from(&args.data, spec.clone()),
            DataSource::Store {
                num_tasks,
                shuffle_seed,
                ..
            } => {
                if let Some(t) = args.data.tasks {
                    *num_tasks = t;
                }
                if args.data.shuffle_seed.is_some() {
                    *shuffle_seed = args.data.shuffle_seed;
                }
            }
        }
    }
    let t = &mut cfg.train;
    if let Some(seed) = args.data.seed {
        t.seed = seed;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
        t.warmup_epochs = t.warmup_epochs.min(v);
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.samples {
        t.samples = v;
        t.eval_samples = v;
    }
    if let Some(v) = args.consolidation_epochs {
        t.consolidation_epochs = v;
    }
    if let Some(p) = args.prior {
        t.prior.kind = p.into();
    }
    if args.no_replay {
        t.replay = false;
    }
    if args.deterministic {
        t.mode = Mode::Deterministic;
    }
    if let Some(p) = args.memory_policy {
        cfg.memory.policy = p.into();
    }
    if let Some(k) = args.memory_budget {
        cfg.memory.budget = Budget::Fixed { total: k };
    }
    if let Some(k) = args.per_class_memory {
        cfg.memory.budget = Budget::Expandable { per_class: k };
    }
    if args.ascending_scores {
        cfg.memory.order = ScoreOrder::Ascending;
    }
    cfg.metrics.phndd |= args.phndd;
    cfg.metrics.transfer |= args.transfer;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    if cfg.output_dir.is_none() {
        let name = args
            .name
            .clone()
            .unwrap_or_else(|| format!("run-seed{}", cfg.train.seed));
        cfg.output_dir = Some(args.output_root.join(name));
    }
    Ok(cfg)
}

/// Trains, evaluates and persists one experiment; returns the results.
pub fn execute(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&StepReport),
) -> Result<ResultsFile> {
    let (store, stream) = cfg.data.load()?;
    let run = cfg.resolve(store.dim)?;
    let out_dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory".into()))?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let outcome = run_experiment_with(&store, &stream, &run, &mut progress)?;
    let centroids = posterior_centroids(&outcome.state, &store, &stream, run.train.seed)?;
    let distances = centroid_cosine_distances(centroids.view());
    save_checkpoint(&outcome.state, out_dir.join(CHECKPOINT_DIR))?;
    outcome.memory.save(out_dir.join(MEMORY_FILE))?;
    let mut echo = cfg.clone();
    echo.model = Some(run.model);
    let results = ResultsFile {
        schema_version: RESULTS_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: echo,
        model: outcome.state.config,
        class_order: stream.class_order(),
        accuracy_matrix: outcome.accuracy.rows.clone(),
        test_sizes: outcome.accuracy.test_sizes.clone(),
        metrics: outcome.metrics,
        steps: outcome.steps,
        memory: outcome.memory,
        centroid_distances: Some(rows_of(&distances)),
    };
    let path = out_dir.join(RESULTS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&results)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_accuracy: Vec<f64>,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_entropy: f64,
    pub mean_variance: f64,
    pub transfer: Option<Vec<f64>>,
    pub phndd: Vec<PhnddRow>,
    pub phndd_average: Option<DetectionMetrics>,
}

/// Evaluation-only pass over the final model of a run.
pub fn evaluate_run(args: &EvalArgs) -> Result<EvalReport> {
    let results = ResultsFile::load(args.run_dir.join(RESULTS_FILE))?;
    let mut data = results.config.data.clone();
    if let Some(path) = &args.store {
        let (num_tasks, shuffle_seed) = match &data {
            DataSource::Store {
                num_tasks,
                shuffle_seed,
                ..
            } => (*num_tasks, *shuffle_seed),
            DataSource::Synth(spec) => (spec.num_tasks, None),
        };
        data = DataSource::Store {
            path: path.clone(),
            num_tasks,
            shuffle_seed,
        };
    }
    let (store, stream) = data.load()?;
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run_dir.join(CHECKPOINT_DIR));
    let state: ModelState = load_checkpoint(&checkpoint)?;
    ensure!(
        state.dim() == store.dim,
        Config,
        "checkpoint dim {} does not match feature dim {}",
        state.dim(),
        store.dim
    );
    let tasks = state.adapters.len();
    ensure!(
        tasks >= 1 && tasks <= stream.num_tasks(),
        Config,
        "checkpoint has {tasks} tasks but the stream has {}",
        stream.num_tasks()
    );
    ensure!(
        state.task_sizes() == stream.task_sizes()[..tasks],
        Config,
        "checkpoint task sizes do not match the stream"
    );
    let train = results.config.train;
    let samples = args.samples.unwrap_or(train.eval_samples);
    let step = tasks - 1;
    let eval_seed = crate::rng::derive_seed(train.seed, 600 + step as u64);
    let eval = evaluate_step(&state, &store, &stream, step, samples, eval_seed)?;
    let bins = results.config.metrics.ece_bins;
    let phndd = if args.phndd {
        ensure!(
            stream.num_tasks() >= 2,
            InvalidArgument,
            "novel-data detection needs at least two tasks"
        );
        let last = (tasks).min(stream.num_tasks() - 1);
        (0..last)
            .map(|t| {
                let mut partial = state.clone();
                partial.adapters.truncate(t + 1);
                phndd_protocol(
                    &partial,
                    &store,
                    &stream,
                    t,
                    samples,
                    crate::rng::derive_seed(eval_seed, t as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let transfer = (tasks < stream.num_tasks())
        .then(|| future_task_accuracy(&state, &store, &stream, step))
        .transpose()?;
    let n = eval.labels.len() as f64;
    Ok(EvalReport {
        accuracy: {
            let weights: Vec<f64> = stream.tasks[..tasks]
                .iter()
                .map(|t| t.test_rows.len() as f64)
                .collect();
            let total: f64 = weights.iter().sum();
            eval.task_accuracy
                .iter()
                .zip(&weights)
                .map(|(a, w)| a * w)
                .sum::<f64>()
                / total.max(1.0)
        },
        ece: ece(eval.mean_probs.view(), &eval.labels, bins)?,
        mean_entropy: eval.entropy.sum() / n,
        mean_variance: eval.variance.sum() / n,
        task_accuracy: eval.task_accuracy,
        transfer,
        phndd_average: phndd_average(&phndd),
        phndd,
    })
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Step accuracy (percent) against the number of tasks learned, one polyline per run.
pub fn accuracy_svg(runs: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let steps = runs.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (steps - 1) as f64;
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a.clamp(0.0, 1.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for pct in [0, 25, 50, 75, 100] {
        let yy = y(pct as f64 / 100.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{pct}</text>"#,
            pad - 6.0,
            yy + 4.0
        );
    }
    for i in 0..steps {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            x(i),
            h - pad + 16.0,
            i + 1
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">tasks learned</text>"#,
        w / 2.0,
        h - 10.0
    );
    for (k, (label, acc)) in runs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| format!("{:.2},{:.2}", x(i), y(a)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            w - pad - 150.0,
            pad + 16.0 * k as f64,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grayscale heatmap of a square distance matrix.
pub fn heatmap_svg(matrix: &[Vec<f64>]) -> String {
    let n = matrix.len().max(1);
    let cell = (480.0 / n as f64).max(2.0);
    let size = cell * n as f64;
    let max = matrix
        .iter()
        .flatten()
        .copied()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">"#
    );
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v / max)).round() as u8;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                j as f64 * cell,
                i as f64 * cell
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn results_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(RESULTS_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Writes `accuracy.svg` and one `centroids_<k>.svg` per run with centroid data.
pub fn plot(args: &PlotArgs) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    let mut heatmaps = Vec::new();
    for p in &args.results {
        let path = results_path(p);
        let r = ResultsFile::load(&path)?;
        let label = path.parent().and_then(|d| d.file_name()).map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        runs.push((label, r.metrics.step_accuracy.clone()));
        if let Some(m) = r.centroid_distances {
            heatmaps.push(m);
        }
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut written = Vec::new();
    let path = args.out.join("accuracy.svg");
    std::fs::write(&path, accuracy_svg(&runs)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for (k, m) in heatmaps.iter().enumerate() {
        let path = args.out.join(format!("centroids_{k}.svg"));
        std::fs::write(&path, heatmap_svg(m)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn export_features(args: &ExportArgs) -> Result<()> {
    ensure!(
        args.data.store.is_none(),
        Config,
        "export-features only generates synthetic stores; real backbones must write the same layout"
    );
    let spec = synth_from(&args.data, SynthSpec::default());
    let (store, _) = synth_stream(&spec)?;
    save_feature_store(&store, &args.out)
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    })
}

/// Parses `std::env::args` and dispatches.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = experiment_from_args(&args)?;
            let quiet = args.quiet;
            let results = execute(&cfg, |r| {
                if !quiet {
                    eprintln!(
                        "step {}: accuracy {:.2}% ece {:.4} memory {} ({:.1}s)",
                        r.step + 1,
                        100.0 * r.accuracy,
                        r.ece,
                        r.memory_size,
                        r.seconds
                    );
                }
            })?;
            let m = &results.metrics;
            println!("avg {:.2} last {:.2}", 100.0 * m.avg, 100.0 * m.last);
            if let Some(b) = m.bwt {
                println!("bwt {b:.4}");
            }
            if let Some(avg) = m.phndd_average {
                println!("phndd {avg}");
            }
            println!("results in {}", cfg.output_dir.expect("resolved").display());
            Ok(())
        }
        Command::Eval(args) => {
            let report = evaluate_run(&args)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Plot(args) => {
            for p in plot(&args)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::ExportFeatures(args) => export_features(&args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_flags_are_parsed() {
        let cli = Cli::try_parse_from([
            "probadapt",
            "run",
            "--synth",
            "--tasks",
            "5",
            "--classes-per-task",
            "4",
            "--dim",
            "64",
            "--seed",
            "7",
            "--out",
            "/tmp/x",
        ])
        .unwrap();
        let Command::Run(args) = cli.command else {
            panic!("expected run")
        };
        let cfg = experiment_from_args(&args).unwrap();
        let DataSource::Synth(spec) = &cfg.data else {
            panic!("expected synth")
        };
        assert_eq!(
            (spec.num_tasks, spec.classes_per_task, spec.dim, spec.seed),
            (5, 4, 64, 7)
        );
        assert_eq!(cfg.train.seed, 7);
        assert!(cfg.train.replay);
    }

    #[test]
    fn missing_source_is_config_error() {
        let cli = Cli::try_parse_from(["probadapt", "run"]).unwrap();
        let Command::Run(args) = cli.command else {
            panic!("expected run")
        };
        assert!(experiment_from_args(&args).unwrap_err().is_config());
        assert!(Cli::try_parse_from(["probadapt", "run", "--synth", "--store", "x"]).is_err());
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let m = vec![vec![0.0, 0.5], vec![0.5, 0.0]];
        let svg = heatmap_svg(&m);
        assert_eq!(svg.matches("<rect").count(), 4);
        let curves = accuracy_svg(&[("a".into(), vec![1.0, 0.5]), ("b".into(), vec![0.9, 0.8])]);
        assert_eq!(curves.matches("<polyline").count(), 2);
    }
}
