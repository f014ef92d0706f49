//! The continual-learning loop: per-task training with past adapters frozen,
//! memory consolidation, exemplar updates and per-step evaluation.

pub mod checkpoint;

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::adapters::{Mode, ModelConfig, ModelGrads, ModelState, Noise, Trainable};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{
    self, avg_last, bwt, ece, evaluate_step, future_task_accuracy, phndd_average, phndd_protocol,
    AccuracyMatrix, DetectionMetrics, PhnddRow,
};
use crate::feature_provider::{epoch_seed, FeatureStore, Minibatches, Split, TaskStream};
use crate::memory::{
    balanced_dataset, Budget, MemoryBuffer, SampleScores, ScoreOrder, SelectionPolicy,
};
use crate::objectives::{
    loss_and_grads, pick_context_rows, LossWeights, ObjectiveInputs, Phase, PriorKind, PriorSpec,
};
use crate::rng::{chacha, derive_seed};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};

// Seed stream tags.
const TAG_INIT: u64 = 1;
const TAG_ADAPTER: u64 = 100;
const TAG_TRAIN: u64 = 200;
const TAG_TRAIN_NOISE: u64 = 300;
const TAG_CONSOLIDATE: u64 = 400;
const TAG_CONSOLIDATE_NOISE: u64 = 500;
const TAG_EVAL: u64 = 600;
const TAG_MEMORY: u64 = 700;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub consolidation_epochs: usize,
    pub consolidation_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Monte-Carlo samples per forward pass in training.
    pub samples: usize,
    /// Monte-Carlo samples at evaluation.
    pub eval_samples: usize,
    pub seed: u64,
    pub prior: PriorSpec,
    pub weights: LossWeights,
    pub mode: Mode,
    pub replay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            warmup_epochs: 1,
            lr: 1e-3,
            consolidation_epochs: 2,
            consolidation_lr: 1e-4,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0,
            samples: 20,
            eval_samples: 20,
            seed: 1993,
            prior: PriorSpec::default(),
            weights: LossWeights::default(),
            mode: Mode::Probabilistic,
            replay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs > 0, Config, "epochs must be positive");
        ensure!(
            self.warmup_epochs <= self.epochs,
            Config,
            "warmup exceeds the epoch count"
        );
        ensure!(
            self.lr > 0.0 && self.lr.is_finite(),
            Config,
            "lr must be positive"
        );
        ensure!(
            self.consolidation_lr > 0.0 && self.consolidation_lr.is_finite(),
            Config,
            "consolidation lr must be positive"
        );
        ensure!(self.batch_size > 0, Config, "batch size must be positive");
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Config,
            "momentum must lie in [0, 1)"
        );
        ensure!(
            self.weight_decay >= 0.0,
            Config,
            "weight decay must be non-negative"
        );
        ensure!(
            self.samples > 0 && self.eval_samples > 0,
            Config,
            "need at least one MC sample"
        );
        ensure!(
            self.prior.context_batch > 0,
            Config,
            "context batch must be positive"
        );
        self.weights.validate()
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// SGD with momentum over the trainable groups; values are kept
/// float32-representable.
pub struct Sgd {
    velocity: ModelGrads,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(state: &ModelState, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: ModelGrads::zeros_like(state),
            momentum,
            weight_decay,
        }
    }

    pub fn step(
        &mut self,
        state: &mut ModelState,
        grads: &ModelGrads,
        trainable: &Trainable,
        lr: f64,
    ) {
        use crate::params::Parameters;
        let (mu, wd) = (self.momentum, self.weight_decay);
        let update = |w: &mut [f64], g: &[f64], v: &mut [f64]| {
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g + wd * *w;
                *w = f64::from((*w - lr * *v) as f32);
            }
        };
        if trainable.vga {
            let g = grads.vga.params();
            let v = self.velocity.vga.params_mut();
            for ((w, g), v) in state.vga.params_mut().into_iter().zip(g).zip(v) {
                update(w.data, g.data, v.data);
            }
        }
        for (i, adapter) in state.adapters.iter_mut().enumerate() {
            if !trainable.adapters.get(i).copied().unwrap_or(false) {
                continue;
            }
            let g = grads.adapters[i].params();
            let v = self.velocity.adapters[i].params_mut();
            for ((w, g), v) in adapter.params_mut().into_iter().zip(g).zip(v) {
                update(w.data, g.data, v.data);
            }
        }
    }
}

/// Mean loss terms of one stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub steps: usize,
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub kd: f64,
    pub train_accuracy: f64,
}

struct Stage<'a> {
    phase: Phase,
    rows: &'a [usize],
    epochs: usize,
    warmup_epochs: usize,
    lr: f64,
    shuffle_base: u64,
    noise_seed: u64,
}

fn run_stage(
    state: &mut ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    cfg: &TrainConfig,
    stage: Stage<'_>,
) -> Result<StageLog> {
    let tasks = state.adapters.len();
    let texts = evaluation::text_blocks(store, stream, tasks);
    let templates: Vec<Array3<f64>> = stream.tasks[..tasks]
        .iter()
        .map(|t| store.templates_for(&t.classes))
        .collect();
    let positions = stream.position_table(store.num_classes());
    let train = store.split(Split::Train);
    let trainable = Trainable::from_state(state, stage.phase == Phase::Train);
    let per_epoch = stage.rows.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * stage.epochs;
    let warmup = per_epoch * stage.warmup_epochs;
    let mut sgd = Sgd::new(state, cfg.momentum, cfg.weight_decay);
    let mut rng = chacha(stage.noise_seed);
    let mut log = StageLog::default();
    let (mut hits, mut seen) = (0usize, 0usize);
    let mut step = 0;
    for epoch in 0..stage.epochs {
        let batches = Minibatches::over_rows(
            train,
            stage.rows,
            cfg.batch_size,
            Some(epoch_seed(stage.shuffle_base, 0, epoch as u64)),
        )?;
        for batch in batches {
            let labels: Vec<usize> = batch
                .labels
                .iter()
                .map(|&l| positions[l as usize])
                .collect();
            ensure!(
                labels.iter().all(|&p| p < state.num_classes()),
                Contract,
                "batch holds a class the model has not seen"
            );
            let context = (cfg.prior.kind == PriorKind::DataDriven)
                .then(|| pick_context_rows(labels.len(), cfg.prior.context_batch, &mut rng));
            let inputs = ObjectiveInputs {
                images: batch.features.view(),
                labels: &labels,
                text_by_task: &texts,
                templates_by_task: &templates,
                phase: stage.phase,
                prior: cfg.prior,
                weights: cfg.weights,
                context_rows: context.as_deref(),
                prior_override: None,
            };
            let noise = Noise::Sample {
                samples: cfg.samples,
                rng: &mut rng,
            };
            let (loss, grads) = loss_and_grads(state, &inputs, noise, &trainable)?;
            ensure!(
                loss.total.is_finite(),
                Contract,
                "loss diverged at step {step}"
            );
            let lr = lr_at(step, total_steps, warmup, stage.lr);
            sgd.step(state, &grads, &trainable, lr);
            log.total += loss.total;
            log.ce += loss.ce;
            log.kl += loss.kl.iter().sum::<f64>();
            log.kd += loss.kd;
            if epoch + 1 == stage.epochs {
                let (h, n) = batch_hits(&loss.mean_logits, &labels);
                hits += h;
                seen += n;
            }
            step += 1;
        }
    }
    let n = step.max(1) as f64;
    log.steps = step;
    log.total /= n;
    log.ce /= n;
    log.kl /= n;
    log.kd /= n;
    log.train_accuracy = if seen == 0 {
        0.0
    } else {
        hits as f64 / seen as f64
    };
    Ok(log)
}

fn batch_hits(mean_logits: &Array2<f64>, labels: &[usize]) -> (usize, usize) {
    let hits = mean_logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count();
    (hits, labels.len())
}

/// Learns task `task_id`: adds its adapter, then trains it together with the
/// VGA on the task's data (plus memory when replay is on).
pub fn train_task(
    state: &mut ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    task_id: usize,
    memory: &MemoryBuffer,
    cfg: &TrainConfig,
) -> Result<StageLog> {
    cfg.validate()?;
    ensure!(
        task_id == state.adapters.len(),
        InvalidArgument,
        "task {task_id} is out of order: model has {} adapters",
        state.adapters.len()
    );
    let task = stream
        .tasks
        .get(task_id)
        .ok_or_else(|| Error::InvalidArgument(format!("task {task_id} outside stream")))?;
    let templates = store.templates_for(&task.classes);
    state.add_task(
        task.classes.len(),
        templates.view(),
        derive_seed(cfg.seed, TAG_ADAPTER + task_id as u64),
    )?;
    let mut rows = task.train_rows.clone();
    if cfg.replay {
        rows.extend(memory.rows());
    }
    ensure!(
        !rows.is_empty(),
        InvalidArgument,
        "task {task_id} has no training rows"
    );
    run_stage(
        state,
        store,
        stream,
        cfg,
        Stage {
            phase: Phase::Train,
            rows: &rows,
            epochs: cfg.epochs,
            warmup_epochs: cfg.warmup_epochs,
            lr: cfg.lr,
            shuffle_base: derive_seed(cfg.seed, TAG_TRAIN + task_id as u64),
            noise_seed: derive_seed(cfg.seed, TAG_TRAIN_NOISE + task_id as u64),
        },
    )
}

/// Finetunes every adapter on a class-balanced mix of memory and the current
/// task with the VGA frozen and distillation on past tasks. No-op for the
/// first task, with zero consolidation epochs, or without replay.
pub fn consolidate(
    state: &mut ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    task_id: usize,
    memory: &MemoryBuffer,
    cfg: &TrainConfig,
) -> Result<Option<StageLog>> {
    if task_id == 0 || cfg.consolidation_epochs == 0 || !cfg.replay {
        return Ok(None);
    }
    ensure!(
        task_id + 1 == state.adapters.len(),
        Contract,
        "consolidation of task {task_id} with {} adapters",
        state.adapters.len()
    );
    ensure!(
        !memory.is_empty(),
        Contract,
        "memory is empty but replay is enabled"
    );
    let rows = balanced_dataset(
        memory,
        store,
        &stream.tasks[task_id],
        derive_seed(cfg.seed, TAG_CONSOLIDATE),
    );
    ensure!(!rows.is_empty(), Contract, "class-balanced set is empty");
    for a in &mut state.adapters {
        a.trainable = true;
    }
    let log = run_stage(
        state,
        store,
        stream,
        cfg,
        Stage {
            phase: Phase::Consolidate,
            rows: &rows,
            epochs: cfg.consolidation_epochs,
            warmup_epochs: 0,
            lr: cfg.consolidation_lr,
            shuffle_base: derive_seed(cfg.seed, TAG_CONSOLIDATE + 1 + task_id as u64),
            noise_seed: derive_seed(cfg.seed, TAG_CONSOLIDATE_NOISE + task_id as u64),
        },
    );
    state.freeze_all();
    log.map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub policy: SelectionPolicy,
    pub budget: Budget,
    pub order: ScoreOrder,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            policy: SelectionPolicy::Herding,
            budget: Budget::Fixed { total: 2000 },
            order: ScoreOrder::Descending,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub ece_bins: usize,
    pub phndd: bool,
    pub transfer: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ece_bins: 15,
            phndd: false,
            transfer: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            model: ModelConfig::for_dim(dim),
            train: TrainConfig::default(),
            memory: MemoryConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        ensure!(
            self.metrics.ece_bins > 0,
            Config,
            "ece_bins must be positive"
        );
        if let Budget::Fixed { total: 0 } | Budget::Expandable { per_class: 0 } = self.memory.budget
        {
            ensure!(
                !self.train.replay,
                Config,
                "replay is enabled with a zero memory budget"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub train: StageLog,
    pub consolidation: Option<StageLog>,
    pub task_accuracy: Vec<f64>,
    pub accuracy: f64,
    pub ece: f64,
    pub memory_size: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg: f64,
    pub last: f64,
    pub bwt: Option<f64>,
    pub transfer: Option<f64>,
    /// Calibration error after the final step.
    pub ece: f64,
    pub step_accuracy: Vec<f64>,
    pub phndd: Vec<PhnddRow>,
    pub phndd_average: Option<DetectionMetrics>,
}

pub struct ExperimentOutcome {
    pub state: ModelState,
    pub accuracy: AccuracyMatrix,
    pub metrics: MetricsReport,
    pub steps: Vec<StepReport>,
    pub memory: MemoryBuffer,
}

pub fn run_experiment(
    store: &FeatureStore,
    stream: &TaskStream,
    cfg: &RunConfig,
) -> Result<ExperimentOutcome> {
    run_experiment_with(store, stream, cfg, &mut |_| {})
}

/// Full stream: train → consolidate → update memory → evaluate, per task.
/// `observer` sees each step's report as soon as it is available.
pub fn run_experiment_with(
    store: &FeatureStore,
    stream: &TaskStream,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    ensure!(
        stream.num_tasks() > 0,
        InvalidArgument,
        "stream has no tasks"
    );
    ensure!(
        store.dim == cfg.model.vga.dim,
        Config,
        "features have dim {} but the model expects {}",
        store.dim,
        cfg.model.vga.dim
    );
    let train_cfg = &cfg.train;
    let mut model_cfg = cfg.model;
    model_cfg.mode = train_cfg.mode;
    let mut state = ModelState::new(model_cfg, derive_seed(train_cfg.seed, TAG_INIT))?;
    let mut memory = MemoryBuffer::new(
        cfg.memory.policy,
        cfg.memory.budget,
        derive_seed(train_cfg.seed, TAG_MEMORY),
    );
    memory.order = cfg.memory.order;
    let mut accuracy =
        AccuracyMatrix::new(stream.tasks.iter().map(|t| t.test_rows.len()).collect());
    let mut steps = Vec::with_capacity(stream.num_tasks());
    let mut phndd = Vec::new();
    let mut transfer_rows = Vec::new();
    let mut final_ece = 0.0;

    for t in 0..stream.num_tasks() {
        let start = Instant::now();
        let train = train_task(&mut state, store, stream, t, &memory, train_cfg)?;
        let consolidation = consolidate(&mut state, store, stream, t, &memory, train_cfg)?;
        if train_cfg.replay {
            let eval_seed = derive_seed(train_cfg.seed, TAG_MEMORY + 1 + t as u64);
            let snapshot = &state;
            let mut scorer = |rows: &[usize]| -> Result<SampleScores> {
                let s = evaluation::score_rows(
                    snapshot,
                    store,
                    stream,
                    Split::Train,
                    rows,
                    train_cfg.eval_samples,
                    eval_seed,
                )?;
                Ok(SampleScores {
                    entropy: s.entropy.to_vec(),
                    variance: s.variance.to_vec(),
                    energy: s.energy.to_vec(),
                })
            };
            memory.update(store, &stream.tasks[t], Some(&mut scorer))?;
        }
        let eval_seed = derive_seed(train_cfg.seed, TAG_EVAL + t as u64);
        let eval = evaluate_step(&state, store, stream, t, train_cfg.eval_samples, eval_seed)?;
        let step_ece = ece(eval.mean_probs.view(), &eval.labels, cfg.metrics.ece_bins)?;
        final_ece = step_ece;
        accuracy.push_step(eval.task_accuracy.clone())?;
        if t + 1 < stream.num_tasks() {
            if cfg.metrics.phndd {
                phndd.push(phndd_protocol(
                    &state,
                    store,
                    stream,
                    t,
                    train_cfg.eval_samples,
                    derive_seed(eval_seed, 1),
                )?);
            }
            if cfg.metrics.transfer {
                transfer_rows.push(future_task_accuracy(&state, store, stream, t)?);
            }
        }
        let report = StepReport {
            step: t,
            train,
            consolidation,
            accuracy: *accuracy.step_accuracies().last().expect("pushed"),
            task_accuracy: eval.task_accuracy,
            ece: step_ece,
            memory_size: memory.len(),
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&report);
        steps.push(report);
    }

    let (avg, last) = avg_last(&accuracy)?;
    let metrics = MetricsReport {
        avg,
        last,
        bwt: (stream.num_tasks() >= 2)
            .then(|| bwt(&accuracy))
            .transpose()?,
        transfer: (!transfer_rows.is_empty())
            .then(|| evaluation::transfer(&transfer_rows))
            .transpose()?,
        ece: final_ece,
        step_accuracy: accuracy.step_accuracies(),
        phndd_average: phndd_average(&phndd),
        phndd,
    };
    Ok(ExperimentOutcome {
        state,
        accuracy,
        metrics,
        steps,
        memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_provider::{synth_stream, SynthSpec};
    use crate::params::Parameters;
    use crate::vga::VgaConfig;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints() {
        let (total, warmup, base) = (50, 10, 1e-3);
        assert_abs_diff_eq!(lr_at(0, total, warmup, base), base / 10.0);
        assert_abs_diff_eq!(lr_at(warmup - 1, total, warmup, base), base);
        assert_abs_diff_eq!(lr_at(warmup, total, warmup, base), base);
        assert!(lr_at(total - 1, total, warmup, base) < base * 0.01);
        for s in warmup..total - 1 {
            assert!(lr_at(s + 1, total, warmup, base) <= lr_at(s, total, warmup, base));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 6,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tiny() -> (FeatureStore, TaskStream, RunConfig) {
        let (store, stream) = synth_stream(&SynthSpec {
            num_tasks: 3,
            classes_per_task: 2,
            samples_per_class: 12,
            test_samples_per_class: 4,
            dim: 8,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut cfg = RunConfig::for_dim(8);
        cfg.model.vga = VgaConfig {
            ffn_dim: 16,
            ..VgaConfig::for_dim(8)
        };
        cfg.train.epochs = 2;
        cfg.train.samples = 2;
        cfg.train.eval_samples = 2;
        cfg.train.batch_size = 8;
        cfg.train.consolidation_epochs = 1;
        cfg.memory.budget = Budget::Fixed { total: 12 };
        (store, stream, cfg)
    }

    #[test]
    fn train_task_freezes_past_adapters() {
        let (store, stream, cfg) = tiny();
        let mut state = ModelState::new(cfg.model, 0).unwrap();
        let memory = MemoryBuffer::new(SelectionPolicy::Herding, cfg.memory.budget, 0);
        train_task(&mut state, &store, &stream, 0, &memory, &cfg.train).unwrap();
        let before = state.adapters[0].to_bytes();
        let vga_before = state.vga.to_bytes();
        train_task(&mut state, &store, &stream, 1, &memory, &cfg.train).unwrap();
        assert_eq!(state.adapters[0].to_bytes(), before);
        assert_ne!(state.vga.to_bytes(), vga_before);
        assert!(train_task(&mut state, &store, &stream, 1, &memory, &cfg.train).is_err());
    }

    #[test]
    fn consolidation_keeps_vga_fixed() {
        let (store, stream, cfg) = tiny();
        let mut state = ModelState::new(cfg.model, 0).unwrap();
        let mut memory = MemoryBuffer::new(SelectionPolicy::Herding, cfg.memory.budget, 0);
        train_task(&mut state, &store, &stream, 0, &memory, &cfg.train).unwrap();
        assert!(
            consolidate(&mut state, &store, &stream, 0, &memory, &cfg.train)
                .unwrap()
                .is_none()
        );
        memory.update(&store, &stream.tasks[0], None).unwrap();
        train_task(&mut state, &store, &stream, 1, &memory, &cfg.train).unwrap();
        let vga = state.vga.to_bytes();
        let past = state.adapters[0].to_bytes();
        let log = consolidate(&mut state, &store, &stream, 1, &memory, &cfg.train)
            .unwrap()
            .unwrap();
        assert!(log.kd > 0.0);
        assert_eq!(state.vga.to_bytes(), vga);
        assert_ne!(state.adapters[0].to_bytes(), past);

        let empty = MemoryBuffer::new(SelectionPolicy::Herding, cfg.memory.budget, 0);
        assert!(consolidate(&mut state, &store, &stream, 1, &empty, &cfg.train).is_err());
    }

    #[test]
    fn experiment_is_deterministic() {
        let (store, stream, cfg) = tiny();
        let a = run_experiment(&store, &stream, &cfg).unwrap();
        let b = run_experiment(&store, &stream, &cfg).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.accuracy.rows.len(), 3);
        assert!(a.memory.len() <= 12);
        assert_eq!(a.state.to_bytes(), b.state.to_bytes());
    }

    #[test]
    fn single_task_gives_one_by_one_matrix() {
        let (store, _, cfg) = tiny();
        let stream = crate::feature_provider::build_task_stream(&store, 1, None).unwrap();
        let out = run_experiment(&store, &stream, &cfg).unwrap();
        assert_eq!(out.accuracy.rows, vec![vec![out.metrics.last]]);
        assert!(out.metrics.bwt.is_none());
    }
}
