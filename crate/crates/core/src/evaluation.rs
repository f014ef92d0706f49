//! Metrics: accuracy aggregates, forgetting, zero-shot transfer, calibration
//! and post-hoc novel-data detection with energy scores.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapters::{forward, predict, ModelState};
use crate::error::{ensure, Result};
use crate::feature_provider::{FeatureStore, Split, TaskStream};
use crate::ops::{self, l2_normalize_rows};
use crate::rng::{chacha, derive_seed};
use crate::vga::{build_task_mask, vga_forward_per_image};

/// Rows evaluated per forward pass.
const EVAL_CHUNK: usize = 128;

/// Lower-triangular accuracy table; `rows[t][i]` is the accuracy on task `i`
/// after training step `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Test-set size of each task, used to weight step accuracies.
    pub test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(test_sizes: Vec<usize>) -> Self {
        Self {
            rows: Vec::new(),
            test_sizes,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.test_sizes.len()
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn push_step(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        ensure!(
            t < self.num_tasks(),
            InvalidArgument,
            "matrix already has {} steps",
            t
        );
        ensure!(
            row.len() == t + 1,
            Shape,
            "step {t} needs {} entries, got {}",
            t + 1,
            row.len()
        );
        ensure!(
            row.iter().all(|a| (0.0..=1.0).contains(a)),
            InvalidArgument,
            "accuracies must lie in [0, 1]"
        );
        self.rows.push(row);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        !self.test_sizes.is_empty() && self.rows.len() == self.test_sizes.len()
    }

    /// Step accuracies over all seen classes, weighted by task test size.
    pub fn step_accuracies(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                let sizes = &self.test_sizes[..row.len()];
                let total: usize = sizes.iter().sum();
                if total == 0 {
                    return row.iter().sum::<f64>() / row.len() as f64;
                }
                row.iter()
                    .zip(sizes)
                    .map(|(a, &n)| a * n as f64)
                    .sum::<f64>()
                    / total as f64
            })
            .collect()
    }
}

/// `(Avg, Last)` of the step accuracies.
pub fn avg_last(a: &AccuracyMatrix) -> Result<(f64, f64)> {
    ensure!(
        a.is_complete(),
        InvalidArgument,
        "accuracy matrix is incomplete"
    );
    let steps = a.step_accuracies();
    let avg = steps.iter().sum::<f64>() / steps.len() as f64;
    Ok((avg, *steps.last().expect("non-empty")))
}

/// Backward transfer: mean change of each earlier task from just after it was
/// learned to the end of the stream.
pub fn bwt(a: &AccuracyMatrix) -> Result<f64> {
    ensure!(
        a.is_complete(),
        InvalidArgument,
        "accuracy matrix is incomplete"
    );
    let t = a.num_tasks();
    ensure!(
        t >= 2,
        InvalidArgument,
        "backward transfer needs at least two tasks"
    );
    let last = &a.rows[t - 1];
    let sum: f64 = (0..t - 1).map(|i| last[i] - a.rows[i][i]).sum();
    Ok(sum / (t - 1) as f64)
}

/// Expected calibration error with equal-width confidence bins.
pub fn ece(mean_probs: ArrayView2<f64>, labels: &[usize], bins: usize) -> Result<f64> {
    let n = mean_probs.nrows();
    ensure!(
        n > 0,
        InvalidArgument,
        "calibration needs at least one prediction"
    );
    ensure!(
        labels.len() == n,
        Shape,
        "{} labels for {n} predictions",
        labels.len()
    );
    ensure!(bins > 0, InvalidArgument, "need at least one bin");
    let mut count = vec![0usize; bins];
    let mut hits = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for (row, &y) in mean_probs.outer_iter().zip(labels) {
        let (arg, p) = argmax(row);
        let bin = ((p * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[bin] += 1;
        conf[bin] += p;
        if arg == y {
            hits[bin] += 1.0;
        }
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n as f64)
        .sum())
}

fn argmax(row: ArrayView1<f64>) -> (usize, f64) {
    row.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
    )
}

/// `E = −T·log Σ exp(logit/T)` per row. Lower energy means higher confidence.
pub fn energy_score(logits: ArrayView2<f64>, temperature: f64) -> Array1<f64> {
    logits
        .outer_iter()
        .map(|row| -temperature * ops::log_sum_exp(row.iter().map(|&v| v / temperature)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

/// Threshold sweep with seen samples as positives; equal scores share one
/// threshold.
pub fn phndd_metrics(seen_conf: &[f64], novel_conf: &[f64]) -> Result<DetectionMetrics> {
    ensure!(
        !seen_conf.is_empty() && !novel_conf.is_empty(),
        InvalidArgument,
        "both seen and novel confidences are required"
    );
    ensure!(
        seen_conf.iter().chain(novel_conf).all(|v| v.is_finite()),
        InvalidArgument,
        "confidences must be finite"
    );
    let mut scored: Vec<(f64, bool)> = seen_conf
        .iter()
        .map(|&v| (v, true))
        .chain(novel_conf.iter().map(|&v| (v, false)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = seen_conf.len() as f64;
    let neg = novel_conf.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut auroc = 0.0;
    let mut aupr = 0.0;
    let mut fpr95 = None;
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let tpr = tp / pos;
        let fpr = fp / neg;
        auroc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        aupr += (tpr - prev_tpr) * tp / (tp + fp);
        if fpr95.is_none() && tpr >= 0.95 {
            fpr95 = Some(fpr);
        }
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(DetectionMetrics {
        fpr95: fpr95.unwrap_or(1.0),
        auroc,
        aupr,
    })
}

/// Text features of every task learned so far, one block per adapter.
pub fn text_blocks(store: &FeatureStore, stream: &TaskStream, tasks: usize) -> Vec<Array2<f64>> {
    stream.tasks[..tasks]
        .iter()
        .map(|t| store.class_text_features(&t.classes))
        .collect()
}

/// Monte-Carlo evaluation of the current model on the test rows of all tasks
/// it has adapters for.
#[derive(Debug, Clone)]
pub struct StepEval {
    /// Accuracy per seen task.
    pub task_accuracy: Vec<f64>,
    /// `[N × C]` over seen test rows, task order.
    pub mean_probs: Array2<f64>,
    /// Output positions of the true classes.
    pub labels: Vec<usize>,
    /// `[N]` predictive entropy.
    pub entropy: Array1<f64>,
    /// `[N]` softmax variance across samples, averaged over classes.
    pub variance: Array1<f64>,
    /// `[N]` energy of the sample-averaged logits.
    pub energy: Array1<f64>,
}

/// Sample-averaged logits, probabilities and uncertainty summaries for `rows`.
pub struct RowScores {
    pub mean_logits: Array2<f64>,
    pub mean_probs: Array2<f64>,
    pub entropy: Array1<f64>,
    pub variance: Array1<f64>,
    pub energy: Array1<f64>,
}

pub fn score_rows(
    state: &ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    split: Split,
    rows: &[usize],
    samples: usize,
    seed: u64,
) -> Result<RowScores> {
    let texts = text_blocks(store, stream, state.adapters.len());
    let data = store.split(split);
    let c = state.num_classes();
    let n = rows.len();
    let mut mean_logits = Array2::zeros((n, c));
    let mut mean_probs = Array2::zeros((n, c));
    let mut entropy = Array1::zeros(n);
    let mut variance = Array1::zeros(n);
    let mut rng = chacha(seed);
    for (chunk_id, chunk) in rows.chunks(EVAL_CHUNK).enumerate() {
        let start = chunk_id * EVAL_CHUNK;
        let end = start + chunk.len();
        let images = data.gather(chunk);
        let out = forward(state, images.view(), &texts, samples, &mut rng)?;
        let pred = predict(&out.logits);
        mean_logits
            .slice_mut(s![start..end, ..])
            .assign(&out.logits.mean_axis(Axis(0)).expect("at least one sample"));
        mean_probs
            .slice_mut(s![start..end, ..])
            .assign(&pred.mean_probs);
        entropy.slice_mut(s![start..end]).assign(&pred.entropy);
        variance.slice_mut(s![start..end]).assign(
            &pred
                .variance
                .mean_axis(Axis(1))
                .expect("at least one class"),
        );
    }
    let energy = energy_score(mean_logits.view(), 1.0);
    Ok(RowScores {
        mean_logits,
        mean_probs,
        entropy,
        variance,
        energy,
    })
}

/// Evaluates on the test sets of tasks `0..=step`.
pub fn evaluate_step(
    state: &ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    step: usize,
    samples: usize,
    seed: u64,
) -> Result<StepEval> {
    ensure!(
        step < stream.num_tasks(),
        InvalidArgument,
        "step {step} outside stream"
    );
    ensure!(
        state.adapters.len() == step + 1,
        Contract,
        "model has {} adapters at step {step}",
        state.adapters.len()
    );
    let positions = stream.position_table(store.num_classes());
    let rows: Vec<usize> = stream.tasks[..=step]
        .iter()
        .flat_map(|t| t.test_rows.iter().copied())
        .collect();
    let scores = score_rows(state, store, stream, Split::Test, &rows, samples, seed)?;
    let test = store.split(Split::Test);
    let labels: Vec<usize> = test
        .gather_labels(&rows)
        .iter()
        .map(|&l| positions[l as usize])
        .collect();
    let mut task_accuracy = Vec::with_capacity(step + 1);
    let mut offset = 0;
    for task in &stream.tasks[..=step] {
        let n = task.test_rows.len();
        let hits = (offset..offset + n)
            .filter(|&r| argmax(scores.mean_probs.row(r)).0 == labels[r])
            .count();
        task_accuracy.push(if n == 0 { 0.0 } else { hits as f64 / n as f64 });
        offset += n;
    }
    Ok(StepEval {
        task_accuracy,
        mean_probs: scores.mean_probs,
        labels,
        entropy: scores.entropy,
        variance: scores.variance,
        energy: scores.energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhnddRow {
    pub step: usize,
    #[serde(flatten)]
    pub metrics: DetectionMetrics,
}

/// Novel-data detection after step `step` (0-based): test rows of seen tasks
/// are positives, those of all future tasks are novel. Confidence is the
/// negative energy of the sample-averaged logits over seen classes.
pub fn phndd_protocol(
    state: &ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    step: usize,
    samples: usize,
    seed: u64,
) -> Result<PhnddRow> {
    ensure!(
        step + 1 < stream.num_tasks(),
        InvalidArgument,
        "novel-data detection is undefined at the final step (no future tasks)"
    );
    let seen: Vec<usize> = stream.tasks[..=step]
        .iter()
        .flat_map(|t| t.test_rows.iter().copied())
        .collect();
    let novel: Vec<usize> = stream.tasks[step + 1..]
        .iter()
        .flat_map(|t| t.test_rows.iter().copied())
        .collect();
    let conf = |rows: &[usize], tag: u64| -> Result<Vec<f64>> {
        let s = score_rows(
            state,
            store,
            stream,
            Split::Test,
            rows,
            samples,
            derive_seed(seed, tag),
        )?;
        Ok(s.energy.iter().map(|e| -e).collect())
    };
    let metrics = phndd_metrics(&conf(&seen, 0)?, &conf(&novel, 1)?)?;
    Ok(PhnddRow { step, metrics })
}

/// Averages of the per-step detection rows.
pub fn phndd_average(rows: &[PhnddRow]) -> Option<DetectionMetrics> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(DetectionMetrics {
        fpr95: rows.iter().map(|r| r.metrics.fpr95).sum::<f64>() / n,
        auroc: rows.iter().map(|r| r.metrics.auroc).sum::<f64>() / n,
        aupr: rows.iter().map(|r| r.metrics.aupr).sum::<f64>() / n,
    })
}

/// `[B × S]` logits of classes without an adapter: their template features go
/// through the shared VGA and are fused residually, with no posterior offset.
pub fn zero_shot_logits(
    state: &ModelState,
    images: ArrayView2<f64>,
    text: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    ensure!(
        text.ncols() == state.dim(),
        Shape,
        "text width {} vs model dim {}",
        text.ncols(),
        state.dim()
    );
    let mask = build_task_mask(&[text.nrows()])?;
    let aligned = vga_forward_per_image(&state.vga, text, images, mask.view())?;
    let (img, _) = l2_normalize_rows(&images.to_owned());
    let inv_tau = 1.0 / state.config.temperature;
    let mut logits = Array2::zeros((images.nrows(), text.nrows()));
    for (b, (mut out, fused)) in logits
        .outer_iter_mut()
        .zip(aligned.aligned.outer_iter())
        .enumerate()
    {
        let (unit, _) = l2_normalize_rows(&(&fused + &text));
        out.assign(&(unit.dot(&img.row(b)) * inv_tau));
    }
    Ok(logits)
}

/// Task-local zero-shot accuracy of the current model on every future task.
pub fn future_task_accuracy(
    state: &ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    step: usize,
) -> Result<Vec<f64>> {
    let test = store.split(Split::Test);
    let mut out = Vec::new();
    for task in &stream.tasks[step + 1..] {
        if task.test_rows.is_empty() {
            continue;
        }
        let text = store.class_text_features(&task.classes);
        let mut hits = 0usize;
        for chunk in task.test_rows.chunks(EVAL_CHUNK) {
            let images = test.gather(chunk);
            let logits = zero_shot_logits(state, images.view(), text.view())?;
            for (row, label) in logits.outer_iter().zip(test.gather_labels(chunk)) {
                let pos = task.classes.iter().position(|&c| c == label);
                if pos == Some(argmax(row).0) {
                    hits += 1;
                }
            }
        }
        out.push(hits as f64 / task.test_rows.len() as f64);
    }
    Ok(out)
}

/// Mean over steps `t < T` of the mean future-task zero-shot accuracy.
pub fn transfer(per_step: &[Vec<f64>]) -> Result<f64> {
    let steps: Vec<f64> = per_step
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    ensure!(
        !steps.is_empty(),
        InvalidArgument,
        "transfer needs at least two tasks"
    );
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

/// Pairwise `1 − cos` between class centroids; symmetric with zero diagonal.
pub fn centroid_cosine_distances(centroids: ArrayView2<f64>) -> Array2<f64> {
    let (unit, _) = l2_normalize_rows(&centroids.to_owned());
    let n = unit.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = (1.0 - unit.row(i).dot(&unit.row(j))).max(0.0);
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

/// Mean of posterior means per class over the test rows of seen tasks,
/// `[C × d]`.
pub fn posterior_centroids(
    state: &ModelState,
    store: &FeatureStore,
    stream: &TaskStream,
    seed: u64,
) -> Result<Array2<f64>> {
    let tasks = state.adapters.len();
    let texts = text_blocks(store, stream, tasks);
    let rows: Vec<usize> = stream.tasks[..tasks]
        .iter()
        .flat_map(|t| t.test_rows.iter().copied())
        .collect();
    ensure!(
        !rows.is_empty(),
        InvalidArgument,
        "no test rows for centroids"
    );
    let test = store.split(Split::Test);
    let mut sums = Array2::zeros((state.num_classes(), state.dim()));
    let mut rng = chacha(seed);
    for chunk in rows.chunks(EVAL_CHUNK) {
        let out = forward(state, test.gather(chunk).view(), &texts, 1, &mut rng)?;
        for (adapter, task) in state.adapters.iter().zip(&out.tasks) {
            let summed = task.posterior.mu.sum_axis(Axis(0));
            let mut block = sums.slice_mut(s![adapter.class_range.clone(), ..]);
            block += &summed;
        }
    }
    Ok(sums / rows.len() as f64)
}

impl std::fmt::Display for DetectionMetrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "FPR95 {:.4} AUROC {:.4} AUPR {:.4}",
            self.fpr95, self.auroc, self.aupr
        )
    }
}

impl From<DetectionMetrics> for [f64; 3] {
    fn from(m: DetectionMetrics) -> Self {
        [m.fpr95, m.auroc, m.aupr]
    }
}
