//! Frozen-backbone features, class-incremental task streams and minibatching.
//!
//! A [`FeatureStore`] is the only contact surface with any backbone: image
//! embeddings with labels for a train and a test split, plus `L` text-template
//! embeddings per class. On disk it is a directory holding `manifest.json` and
//! raw little-endian blobs.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{chacha, derive_seed, SplitMix64};

pub const DEFAULT_SHUFFLE_SEED: u64 = 1993;
pub const MANIFEST_FILE: &str = "manifest.json";
const TRAIN_IMAGES: &str = "train_images.f32";
const TRAIN_LABELS: &str = "train_labels.u32";
const TEST_IMAGES: &str = "test_images.f32";
const TEST_LABELS: &str = "test_labels.u32";
const TEXT_FEATURES: &str = "text_features.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Image embeddings and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub images: Array2<f32>,
    pub labels: Vec<u32>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers rows into a float64 matrix.
    pub fn gather(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.images.ncols()));
        for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&self.images.row(r).mapv(f64::from));
        }
        out
    }

    pub fn gather_labels(&self, rows: &[usize]) -> Vec<u32> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub dim: usize,
    pub train: SplitData,
    pub test: SplitData,
    /// `[num_classes × L × d]`, class-major then template.
    pub text_features: Array3<f32>,
    pub class_names: Vec<String>,
    /// Prompt templates the exporter used, when known.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub num_classes: usize,
    pub num_templates: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dtype: String,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub templates: Vec<String>,
}

impl FeatureStore {
    pub fn num_classes(&self) -> usize {
        self.text_features.shape()[0]
    }

    pub fn num_templates(&self) -> usize {
        self.text_features.shape()[1]
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Template features of the given classes, `[|classes| × L × d]` in float64.
    pub fn templates_for(&self, classes: &[u32]) -> Array3<f64> {
        let (l, d) = (self.num_templates(), self.dim);
        let mut out = Array3::zeros((classes.len(), l, d));
        for (mut dst, &c) in out.outer_iter_mut().zip(classes) {
            dst.assign(
                &self
                    .text_features
                    .index_axis(Axis(0), c as usize)
                    .mapv(f64::from),
            );
        }
        out
    }

    /// Per-class text feature: the L2-normalized mean of its templates.
    pub fn class_text_features(&self, classes: &[u32]) -> Array2<f64> {
        class_prototypes(&self.templates_for(classes))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.dim > 0,
            InvalidArgument,
            "feature dimension must be positive"
        );
        let c = self.num_classes();
        ensure!(
            self.class_names.len() == c,
            InvalidArgument,
            "{} class names for {} text-feature rows",
            self.class_names.len(),
            c
        );
        ensure!(
            self.text_features.shape()[2] == self.dim,
            InvalidArgument,
            "text features have width {} but dim is {}",
            self.text_features.shape()[2],
            self.dim
        );
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            ensure!(
                split.images.ncols() == self.dim && split.images.nrows() == split.labels.len(),
                InvalidArgument,
                "{name} split is {:?} with {} labels",
                split.images.shape(),
                split.labels.len()
            );
            if let Some(bad) = split.labels.iter().find(|&&l| l as usize >= c) {
                return Err(Error::InvalidArgument(format!(
                    "{name} label {bad} out of range for {c} classes"
                )));
            }
            ensure!(
                split.images.iter().all(|v| v.is_finite()),
                InvalidArgument,
                "{name} images contain NaN/Inf"
            );
        }
        ensure!(
            self.text_features.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "text features contain NaN/Inf"
        );
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            dim: self.dim,
            num_classes: self.num_classes(),
            num_templates: self.num_templates(),
            n_train: self.train.len(),
            n_test: self.test.len(),
            dtype: "f32le".into(),
            class_names: self.class_names.clone(),
            templates: self.templates.clone(),
        }
    }
}

/// Mean over templates followed by L2 normalization, `[C × L × d] → [C × d]`.
pub fn class_prototypes(templates: &Array3<f64>) -> Array2<f64> {
    let mean = templates
        .mean_axis(Axis(1))
        .expect("at least one template per class");
    crate::ops::l2_normalize_rows(&mean).0
}

pub fn save_feature_store(store: &FeatureStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    store.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_vec_pretty(&store.manifest())?;
    write_file(&dir.join(MANIFEST_FILE), &manifest)?;
    write_f32(&dir.join(TRAIN_IMAGES), store.train.images.iter().copied())?;
    write_u32(&dir.join(TRAIN_LABELS), &store.train.labels)?;
    write_f32(&dir.join(TEST_IMAGES), store.test.images.iter().copied())?;
    write_u32(&dir.join(TEST_LABELS), &store.test.labels)?;
    write_f32(
        &dir.join(TEXT_FEATURES),
        store.text_features.iter().copied(),
    )?;
    Ok(())
}

pub fn load_feature_store(dir: impl AsRef<Path>) -> Result<FeatureStore> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if m.dtype != "f32le" || m.dim == 0 || m.class_names.len() != m.num_classes {
        return Err(Error::Manifest {
            path: manifest_path,
            message: format!(
                "expected dtype f32le, positive dim and one name per class (dtype={}, dim={}, names={}, classes={})",
                m.dtype,
                m.dim,
                m.class_names.len(),
                m.num_classes
            ),
        });
    }

    let train_images = read_f32(&dir.join(TRAIN_IMAGES), m.n_train * m.dim)?;
    let train_labels = read_u32(&dir.join(TRAIN_LABELS), m.n_train, m.num_classes)?;
    let test_images = read_f32(&dir.join(TEST_IMAGES), m.n_test * m.dim)?;
    let test_labels = read_u32(&dir.join(TEST_LABELS), m.n_test, m.num_classes)?;
    let text = read_f32(
        &dir.join(TEXT_FEATURES),
        m.num_classes * m.num_templates * m.dim,
    )?;

    let store = FeatureStore {
        dim: m.dim,
        train: SplitData {
            images: Array2::from_shape_vec((m.n_train, m.dim), train_images)
                .map_err(|e| Error::Shape(e.to_string()))?,
            labels: train_labels,
        },
        test: SplitData {
            images: Array2::from_shape_vec((m.n_test, m.dim), test_images)
                .map_err(|e| Error::Shape(e.to_string()))?,
            labels: test_labels,
        },
        text_features: Array3::from_shape_vec((m.num_classes, m.num_templates, m.dim), text)
            .map_err(|e| Error::Shape(e.to_string()))?,
        class_names: m.class_names,
        templates: m.templates,
    };
    Ok(store)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    write_file(path, &bytes)
}

fn write_u32(path: &Path, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &bytes)
}

pub(crate) fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            expected,
            found: bytes.len() / 4,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { path: path.into() });
    }
    Ok(values)
}

fn read_u32(path: &Path, expected: usize, num_classes: usize) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            expected,
            found: bytes.len() / 4,
        });
    }
    let values: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(bad) = values.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::Manifest {
            path: path.into(),
            message: format!("label {bad} out of range for {num_classes} classes"),
        });
    }
    Ok(values)
}

/// One step of the class-incremental stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    /// Original store class ids, in stream order.
    pub classes: Vec<u32>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub shuffle_seed: Option<u64>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Store class ids concatenated in task order; position = model output index.
    pub fn class_order(&self) -> Vec<u32> {
        self.tasks
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    pub fn classes_through(&self, task: usize) -> Vec<u32> {
        self.tasks[..=task]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    /// Output index of a store label among the stream's class order.
    pub fn position_of(&self, label: u32) -> Option<usize> {
        self.class_order().iter().position(|&c| c == label)
    }

    /// Lookup table store label → output index (`usize::MAX` for unused classes).
    pub fn position_table(&self, num_classes: usize) -> Vec<usize> {
        let mut table = vec![usize::MAX; num_classes];
        for (pos, c) in self.class_order().into_iter().enumerate() {
            table[c as usize] = pos;
        }
        table
    }

    pub fn task_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes.len()).collect()
    }
}

/// Shuffles classes with SplitMix64/Fisher–Yates (when `shuffle_seed` is set)
/// and chunks them into `num_tasks` equal, disjoint tasks.
pub fn build_task_stream(
    store: &FeatureStore,
    num_tasks: usize,
    shuffle_seed: Option<u64>,
) -> Result<TaskStream> {
    let num_classes = store.num_classes();
    ensure!(num_tasks > 0, InvalidArgument, "num_tasks must be positive");
    ensure!(
        num_tasks <= num_classes,
        InvalidArgument,
        "{num_tasks} tasks requested for {num_classes} classes"
    );
    ensure!(
        num_classes.is_multiple_of(num_tasks),
        InvalidArgument,
        "{num_classes} classes do not divide into {num_tasks} tasks"
    );
    let mut order: Vec<u32> = (0..num_classes as u32).collect();
    if let Some(seed) = shuffle_seed {
        SplitMix64::new(seed).shuffle(&mut order);
    }
    let per_task = num_classes / num_tasks;
    let mut task_of = vec![0usize; num_classes];
    for (pos, &c) in order.iter().enumerate() {
        task_of[c as usize] = pos / per_task;
    }
    let mut tasks: Vec<Task> = order
        .chunks(per_task)
        .map(|chunk| Task {
            classes: chunk.to_vec(),
            train_rows: Vec::new(),
            test_rows: Vec::new(),
        })
        .collect();
    for (row, &l) in store.train.labels.iter().enumerate() {
        tasks[task_of[l as usize]].train_rows.push(row);
    }
    for (row, &l) in store.test.labels.iter().enumerate() {
        tasks[task_of[l as usize]].test_rows.push(row);
    }
    Ok(TaskStream {
        tasks,
        shuffle_seed,
    })
}

/// Desk-scale stand-in for backbone features: Gaussian clusters on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_samples_per_class: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    #[serde(default = "default_num_templates")]
    pub num_templates: usize,
    #[serde(default = "default_template_jitter")]
    pub template_jitter: f64,
    pub seed: u64,
}

fn default_test_per_class() -> usize {
    50
}

fn default_num_templates() -> usize {
    3
}

fn default_template_jitter() -> f64 {
    0.05
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 100,
            test_samples_per_class: default_test_per_class(),
            dim: 64,
            cluster_spread: 0.05,
            num_templates: default_num_templates(),
            template_jitter: default_template_jitter(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_tasks > 0
                && self.classes_per_task > 0
                && self.samples_per_class > 0
                && self.test_samples_per_class > 0
                && self.dim > 0
                && self.num_templates > 0,
            Config,
            "synthetic stream counts must all be positive"
        );
        ensure!(
            self.cluster_spread >= 0.0 && self.cluster_spread.is_finite(),
            Config,
            "cluster spread must be finite and non-negative"
        );
        ensure!(
            self.template_jitter >= 0.0 && self.template_jitter.is_finite(),
            Config,
            "template jitter must be finite and non-negative"
        );
        Ok(())
    }
}

pub fn synth_stream(spec: &SynthSpec) -> Result<(FeatureStore, TaskStream)> {
    spec.validate()?;
    let num_classes = spec.num_tasks * spec.classes_per_task;
    let d = spec.dim;
    let mut rng = chacha(spec.seed);
    let mut gaussian =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.into_iter().map(|x| x / n).collect()
        } else {
            v
        }
    };

    let centers: Vec<Vec<f64>> = (0..num_classes).map(|_| unit(gaussian(d))).collect();

    let mut draw_split = |per_class: usize| -> SplitData {
        let n = per_class * num_classes;
        let mut images = Array2::<f32>::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for (c, center) in centers.iter().enumerate() {
            for k in 0..per_class {
                let noise = gaussian(d);
                let v: Vec<f64> = center
                    .iter()
                    .zip(&noise)
                    .map(|(m, e)| m + spec.cluster_spread * e)
                    .collect();
                let v = unit(v);
                let row = c * per_class + k;
                for (dst, x) in images.row_mut(row).iter_mut().zip(v) {
                    *dst = x as f32;
                }
                labels.push(c as u32);
            }
        }
        SplitData { images, labels }
    };
    let train = draw_split(spec.samples_per_class);
    let test = draw_split(spec.test_samples_per_class);

    let l = spec.num_templates;
    let mut text = Array3::<f32>::zeros((num_classes, l, d));
    for (c, center) in centers.iter().enumerate() {
        for t in 0..l {
            let noise = gaussian(d);
            let v: Vec<f64> = center
                .iter()
                .zip(&noise)
                .map(|(m, e)| m + spec.template_jitter * e)
                .collect();
            for (dst, x) in text
                .slice_mut(ndarray::s![c, t, ..])
                .iter_mut()
                .zip(unit(v))
            {
                *dst = x as f32;
            }
        }
    }

    let store = FeatureStore {
        dim: d,
        train,
        test,
        text_features: text,
        class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
        templates: (0..l).map(|t| format!("synthetic template {t}")).collect(),
    };
    let stream = build_task_stream(&store, spec.num_tasks, None)?;
    Ok((store, stream))
}

/// A batch of float64 features with their store labels and row ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
}

/// Single-consumer iterator covering every row exactly once per epoch.
pub struct Minibatches<'a> {
    split: &'a SplitData,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Minibatches<'a> {
    pub fn over_rows(
        split: &'a SplitData,
        rows: &[usize],
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<Self> {
        ensure!(!rows.is_empty(), InvalidArgument, "no rows to batch");
        ensure!(
            batch_size > 0,
            InvalidArgument,
            "batch size must be positive"
        );
        let mut order = rows.to_vec();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut chacha(seed));
        }
        Ok(Self {
            split,
            order,
            batch_size,
            cursor: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Minibatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let rows = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(Batch {
            features: self.split.gather(&rows),
            labels: self.split.gather_labels(&rows),
            rows,
        })
    }
}

/// Training minibatches of one task.
pub fn minibatches<'a>(
    store: &'a FeatureStore,
    stream: &TaskStream,
    task_id: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Minibatches<'a>> {
    let task = stream.tasks.get(task_id).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "task {task_id} outside stream of {} tasks",
            stream.num_tasks()
        ))
    })?;
    ensure!(
        !task.train_rows.is_empty(),
        InvalidArgument,
        "task {task_id} has no training rows"
    );
    Minibatches::over_rows(
        &store.train,
        &task.train_rows,
        batch_size,
        Some(shuffle_seed),
    )
}

/// Nearest-center accuracy of `images` against per-class `centers`.
pub fn nearest_center_accuracy(
    images: ArrayView2<f64>,
    labels: &[usize],
    centers: ArrayView2<f64>,
) -> f64 {
    let scores = images.dot(&centers.t());
    let hits = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
            best.0 == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn epoch_seed(base: u64, stage: u64, epoch: u64) -> u64 {
    derive_seed(derive_seed(base, stage), epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_store(num_classes: usize, per_class: usize) -> FeatureStore {
        let spec = SynthSpec {
            num_tasks: 1,
            classes_per_task: num_classes,
            samples_per_class: per_class,
            test_samples_per_class: 2,
            dim: 8,
            ..SynthSpec::default()
        };
        synth_stream(&spec).unwrap().0
    }

    #[test]
    fn cifar_protocol_stream_shape() {
        let store = tiny_store(100, 1);
        let stream = build_task_stream(&store, 10, Some(DEFAULT_SHUFFLE_SEED)).unwrap();
        assert_eq!(stream.num_tasks(), 10);
        assert!(stream.tasks.iter().all(|t| t.classes.len() == 10));
        let mut all = stream.class_order();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn unshuffled_stream_keeps_class_order() {
        let store = tiny_store(6, 1);
        let stream = build_task_stream(&store, 3, None).unwrap();
        assert_eq!(stream.class_order(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(stream.tasks[1].classes, vec![2, 3]);
    }

    #[test]
    fn same_seed_same_stream() {
        let store = tiny_store(20, 2);
        let a = build_task_stream(&store, 5, Some(7)).unwrap();
        let b = build_task_stream(&store, 5, Some(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stream_errors() {
        let store = tiny_store(10, 1);
        assert!(build_task_stream(&store, 3, None).is_err());
        assert!(build_task_stream(&store, 11, None).is_err());
        assert!(build_task_stream(&store, 0, None).is_err());
    }

    #[test]
    fn synth_zero_spread_collapses_onto_center() {
        let spec = SynthSpec {
            cluster_spread: 0.0,
            samples_per_class: 3,
            ..SynthSpec::default()
        };
        let (store, stream) = synth_stream(&spec).unwrap();
        assert_eq!(store.num_classes(), 20);
        assert_eq!(stream.num_tasks(), 5);
        for c in 0..20 {
            let rows: Vec<usize> = (c * 3..c * 3 + 3).collect();
            let first = store.train.images.row(rows[0]).to_owned();
            for &r in &rows[1..] {
                assert_eq!(store.train.images.row(r), first);
            }
        }
    }

    #[test]
    fn minibatch_sizes_and_partition() {
        let store = tiny_store(1, 130);
        let rows: Vec<usize> = (0..130).collect();
        let sizes: Vec<usize> = Minibatches::over_rows(&store.train, &rows, 64, Some(3))
            .unwrap()
            .map(|b| b.rows.len())
            .collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let mut seen: Vec<usize> = Minibatches::over_rows(&store.train, &rows, 64, Some(3))
            .unwrap()
            .flat_map(|b| b.rows)
            .collect();
        seen.sort();
        assert_eq!(seen, rows);
        let a: Vec<_> = Minibatches::over_rows(&store.train, &rows, 64, Some(3))
            .unwrap()
            .flat_map(|b| b.rows)
            .collect();
        let b: Vec<_> = Minibatches::over_rows(&store.train, &rows, 64, Some(3))
            .unwrap()
            .flat_map(|b| b.rows)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_task_is_rejected() {
        let store = tiny_store(2, 2);
        assert!(Minibatches::over_rows(&store.train, &[], 4, None).is_err());
    }
}
