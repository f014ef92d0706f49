//! Rehearsal buffer of exemplar row indices with fixed or expandable budgets.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::feature_provider::{FeatureStore, Split, Task};
use crate::ops::l2_normalize_rows;
use crate::rng::{chacha, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    #[default]
    Herding,
    Random,
    Entropy,
    Variance,
    Energy,
}

impl SelectionPolicy {
    pub fn needs_model(self) -> bool {
        matches!(self, Self::Entropy | Self::Variance | Self::Energy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrder {
    /// Highest score (most uncertain) first.
    #[default]
    Descending,
    Ascending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Budget {
    /// `total` exemplars shared by all seen classes.
    Fixed { total: usize },
    /// `per_class` exemplars for every class, growing with the stream.
    Expandable { per_class: usize },
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Fixed { total: 2000 }
    }
}

/// Maps train rows to uncertainty scores.
pub type Scorer<'a> = dyn FnMut(&[usize]) -> Result<SampleScores> + 'a;

/// Per-sample uncertainty scores, aligned with the rows they were computed on.
#[derive(Debug, Clone, Default)]
pub struct SampleScores {
    pub entropy: Vec<f64>,
    pub variance: Vec<f64>,
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub policy: SelectionPolicy,
    pub budget: Budget,
    #[serde(default)]
    pub order: ScoreOrder,
    pub seed: u64,
    /// Store class id → train-split row indices in selection order.
    pub entries: BTreeMap<u32, Vec<usize>>,
}

impl MemoryBuffer {
    pub fn new(policy: SelectionPolicy, budget: Budget, seed: u64) -> Self {
        Self {
            policy,
            budget,
            order: ScoreOrder::default(),
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All stored rows, class by class.
    pub fn rows(&self) -> Vec<usize> {
        self.entries.values().flatten().copied().collect()
    }

    /// Per-class quota once `classes` classes are stored.
    pub fn quota(&self, classes: usize) -> Result<usize> {
        let q = match self.budget {
            Budget::Fixed { total } => total / classes.max(1),
            Budget::Expandable { per_class } => per_class,
        };
        ensure!(
            q > 0,
            Config,
            "memory budget {:?} leaves no exemplars for {classes} classes",
            self.budget
        );
        Ok(q)
    }

    /// Adds exemplars for the classes of `task`. For a fixed budget the quota
    /// is recomputed over all seen classes and older lists are cut to a prefix.
    ///
    /// `scorer` maps train rows to uncertainty scores and is only called for
    /// score-based policies.
    pub fn update(
        &mut self,
        store: &FeatureStore,
        task: &Task,
        scorer: Option<&mut Scorer<'_>>,
    ) -> Result<()> {
        let new: Vec<u32> = task
            .classes
            .iter()
            .copied()
            .filter(|c| !self.entries.contains_key(c))
            .collect();
        let quota = self.quota(self.entries.len() + new.len())?;
        if matches!(self.budget, Budget::Fixed { .. }) {
            for list in self.entries.values_mut() {
                list.truncate(quota);
            }
        }
        let train = store.split(Split::Train);
        let mut by_class: BTreeMap<u32, Vec<usize>> =
            new.iter().map(|&c| (c, Vec::new())).collect();
        for &row in &task.train_rows {
            if let Some(list) = by_class.get_mut(&train.labels[row]) {
                list.push(row);
            }
        }
        let mut scorer = scorer;
        for (class, rows) in by_class {
            let k = quota.min(rows.len());
            let picked = match self.policy {
                SelectionPolicy::Herding => herding_select(train.gather(&rows).view(), k)?,
                SelectionPolicy::Random => {
                    let mut idx: Vec<usize> = (0..rows.len()).collect();
                    idx.shuffle(&mut chacha(derive_seed(self.seed, u64::from(class))));
                    idx.truncate(k);
                    idx
                }
                policy => {
                    let f = scorer.as_deref_mut().ok_or_else(|| {
                        Error::Contract(format!(
                            "{policy:?} selection needs a model to score samples"
                        ))
                    })?;
                    let s = f(&rows)?;
                    let values = match policy {
                        SelectionPolicy::Entropy => s.entropy,
                        SelectionPolicy::Variance => s.variance,
                        _ => s.energy,
                    };
                    ensure!(
                        values.len() == rows.len(),
                        Shape,
                        "{} scores for {} rows",
                        values.len(),
                        rows.len()
                    );
                    score_select(&values, k, self.order)?
                }
            };
            self.entries
                .insert(class, picked.into_iter().map(|i| rows[i]).collect());
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Greedy herding on unit-normalized features: each step adds the sample that
/// brings the selected mean closest to the class mean. Ties go to the lowest index.
pub fn herding_select(features: ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    ensure!(k <= n, InvalidArgument, "cannot select {k} of {n} samples");
    if k == 0 {
        return Ok(Vec::new());
    }
    let (unit, _) = l2_normalize_rows(&features.to_owned());
    let mean = unit.mean_axis(Axis(0)).expect("non-empty");
    let mut taken = vec![false; n];
    let mut running = Array1::<f64>::zeros(unit.ncols());
    let mut order = Vec::with_capacity(k);
    for step in 1..=k {
        let mut best = None;
        let mut best_dist = f64::INFINITY;
        for (i, row) in unit.outer_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist = gap(mean.view(), running.view(), row, step);
            if dist < best_dist {
                best_dist = dist;
                best = Some(i);
            }
        }
        let i = best.expect("candidates remain while step <= n");
        taken[i] = true;
        running += &unit.row(i);
        order.push(i);
    }
    Ok(order)
}

fn gap(
    mean: ArrayView1<f64>,
    running: ArrayView1<f64>,
    candidate: ArrayView1<f64>,
    count: usize,
) -> f64 {
    let inv = 1.0 / count as f64;
    mean.iter()
        .zip(running)
        .zip(candidate)
        .map(|((m, r), c)| (m - (r + c) * inv).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Top-`k` indices by score; equal scores keep index order.
pub fn score_select(scores: &[f64], k: usize, order: ScoreOrder) -> Result<Vec<usize>> {
    ensure!(
        k <= scores.len(),
        InvalidArgument,
        "cannot select {k} of {} samples",
        scores.len()
    );
    ensure!(
        scores.iter().all(|s| s.is_finite()),
        InvalidArgument,
        "scores must be finite"
    );
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match order {
        ScoreOrder::Descending => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
        ScoreOrder::Ascending => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b])),
    }
    idx.truncate(k);
    Ok(idx)
}

pub fn entropy_select(entropy: &[f64], k: usize, order: ScoreOrder) -> Result<Vec<usize>> {
    score_select(entropy, k, order)
}

pub fn variance_select(variance: &[f64], k: usize, order: ScoreOrder) -> Result<Vec<usize>> {
    score_select(variance, k, order)
}

pub fn energy_select(energy: &[f64], k: usize, order: ScoreOrder) -> Result<Vec<usize>> {
    score_select(energy, k, order)
}

/// Class-balanced rows from memory plus the current task: every class gets as
/// many rows as the smallest class has available (current classes are
/// subsampled with `seed`).
pub fn balanced_dataset(
    buffer: &MemoryBuffer,
    store: &FeatureStore,
    current: &Task,
    seed: u64,
) -> Vec<usize> {
    let train = store.split(Split::Train);
    let mut pools: BTreeMap<u32, Vec<usize>> = buffer
        .entries
        .iter()
        .filter(|(c, _)| !current.classes.contains(c))
        .map(|(&c, rows)| (c, rows.clone()))
        .collect();
    for &c in &current.classes {
        pools.insert(c, Vec::new());
    }
    for &row in &current.train_rows {
        if let Some(list) = pools.get_mut(&train.labels[row]) {
            if current.classes.contains(&train.labels[row]) {
                list.push(row);
            }
        }
    }
    let target = pools.values().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(target * pools.len());
    for (class, mut rows) in pools {
        if rows.len() > target {
            rows.shuffle(&mut chacha(derive_seed(seed, u64::from(class))));
            rows.truncate(target);
        }
        out.extend(rows);
    }
    out
}
