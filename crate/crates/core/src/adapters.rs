//! Per-task probabilistic adapters and the full model forward pass.
//!
//! Each task owns a pair of bias-free `d×d` heads mapping its fused text
//! features to a diagonal Gaussian; class embeddings are Monte-Carlo samples
//! `fused + z_m` compared to the image by scaled cosine similarity.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ops::{self, l2_normalize_rows};
use crate::params::{join, push_matrix, push_matrix_mut, ParamMut, ParamRef, Parameters};
use crate::rng::chacha;
use crate::vga::{
    build_task_mask, vga_backward, vga_forward_per_image, VgaConfig, VgaOutput, VgaParams,
};

pub const DEFAULT_MC_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Probabilistic,
    /// Mean head only; no sampling.
    Deterministic,
}

/// Positivity map applied to the σ-head pre-activation before adding the floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaActivation {
    #[default]
    Softplus,
    /// `max(pre, 0)`: zero weights collapse σ onto the floor.
    Relu,
}

impl SigmaActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            SigmaActivation::Softplus => ops::softplus(x),
            SigmaActivation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            SigmaActivation::Softplus => ops::sigmoid(x),
            SigmaActivation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vga: VgaConfig,
    /// Cosine-similarity temperature τ; logits are `cos/τ`. Not trained.
    pub temperature: f64,
    pub sigma_floor: f64,
    #[serde(default)]
    pub sigma_activation: SigmaActivation,
    #[serde(default)]
    pub mode: Mode,
}

impl ModelConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            vga: VgaConfig::for_dim(dim),
            temperature: 0.01,
            sigma_floor: 1e-6,
            sigma_activation: SigmaActivation::Softplus,
            mode: Mode::Probabilistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vga.validate()?;
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            Config,
            "temperature must be positive"
        );
        ensure!(
            self.sigma_floor > 0.0 && self.sigma_floor.is_finite(),
            Config,
            "sigma floor must be positive"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAdapter {
    /// `[d × d]`, no bias.
    pub w_mu: Array2<f64>,
    /// `[d × d]`, no bias.
    pub w_sigma: Array2<f64>,
    pub trainable: bool,
    pub class_range: Range<usize>,
}

impl TaskAdapter {
    pub fn num_classes(&self) -> usize {
        self.class_range.len()
    }
}

impl Parameters for TaskAdapter {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_matrix(out, join(prefix, "w_mu"), &self.w_mu);
        push_matrix(out, join(prefix, "w_sigma"), &self.w_sigma);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_matrix_mut(out, join(prefix, "w_mu"), &mut self.w_mu);
        push_matrix_mut(out, join(prefix, "w_sigma"), &mut self.w_sigma);
    }
}

/// Template-statistics initialization: `w = (1/d)·sᵀs` with `s` the per-class
/// mean (for μ) or standard deviation (for σ) over the `L` templates.
///
/// Returns `None` when fewer than two templates make the deviation undefined.
pub fn init_adapter_weights(templates: ArrayView3<f64>) -> Option<(Array2<f64>, Array2<f64>)> {
    let (_, l, d) = templates.dim();
    if l < 2 {
        return None;
    }
    let s_mu = templates.mean_axis(Axis(1))?;
    let s_sigma = templates.std_axis(Axis(1), 1.0);
    let scale = 1.0 / d as f64;
    Some((
        s_mu.t().dot(&s_mu) * scale,
        s_sigma.t().dot(&s_sigma) * scale,
    ))
}

fn xavier_square(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (3.0 / d as f64).sqrt();
    Array2::from_shape_fn((d, d), |_| rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vga: VgaParams,
    pub adapters: Vec<TaskAdapter>,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            vga: VgaParams::init(config.vga, seed)?,
            adapters: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.vga.dim
    }

    pub fn num_classes(&self) -> usize {
        self.adapters.last().map_or(0, |a| a.class_range.end)
    }

    pub fn task_sizes(&self) -> Vec<usize> {
        self.adapters.iter().map(TaskAdapter::num_classes).collect()
    }

    /// Appends a trainable adapter for `class_count` new classes and freezes the rest.
    ///
    /// With fewer than two templates per class the weights fall back to a
    /// seeded uniform Xavier draw.
    pub fn add_task(
        &mut self,
        class_count: usize,
        templates: ArrayView3<f64>,
        seed: u64,
    ) -> Result<()> {
        ensure!(
            class_count > 0,
            InvalidArgument,
            "a task needs at least one class"
        );
        let d = self.dim();
        ensure!(
            templates.dim().0 == class_count && templates.dim().2 == d,
            Shape,
            "templates {:?} for {class_count} classes at dim {d}",
            templates.dim()
        );
        let (w_mu, mut w_sigma) = init_adapter_weights(templates).unwrap_or_else(|| {
            let mut rng = chacha(seed);
            (xavier_square(d, &mut rng), xavier_square(d, &mut rng))
        });
        if self.config.mode == Mode::Deterministic {
            w_sigma.fill(0.0);
        }
        for a in &mut self.adapters {
            a.trainable = false;
        }
        let start = self.num_classes();
        let mut adapter = TaskAdapter {
            w_mu,
            w_sigma,
            trainable: true,
            class_range: start..start + class_count,
        };
        adapter.round_to_f32();
        self.adapters.push(adapter);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for a in &mut self.adapters {
            a.trainable = false;
        }
    }

    /// Parameters added on top of the backbone (VGA + all adapters).
    pub fn extra_param_count(&self) -> usize {
        self.vga.num_params() + self.adapters.iter().map(|a| a.num_params()).sum::<usize>()
    }

    /// The mask follows the adapters' class partition.
    pub fn task_mask(&self) -> Result<Array2<f64>> {
        build_task_mask(&self.task_sizes())
    }
}

impl Parameters for ModelState {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.vga.collect(&join(prefix, "vga"), out);
        for (i, a) in self.adapters.iter().enumerate() {
            a.collect(&join(prefix, &format!("adapters.{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.vga.collect_mut(&join(prefix, "vga"), out);
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.collect_mut(&join(prefix, &format!("adapters.{i}")), out);
        }
    }
}

/// Gaussian posterior over each (image, class) fused feature with its MC draws.
#[derive(Debug, Clone)]
pub struct PosteriorBatch {
    /// `[B × S_t × d]`
    pub mu: Array3<f64>,
    /// `[B × S_t × d]`, strictly positive.
    pub sigma: Array3<f64>,
    pub(crate) sigma_pre: Array3<f64>,
    /// `[M × B × S_t × d]` standard-normal draws.
    pub eps: Array4<f64>,
    /// `[M × B × S_t × d]`, `mu + sigma ⊙ eps`.
    pub z: Array4<f64>,
}

impl PosteriorBatch {
    pub fn num_samples(&self) -> usize {
        self.z.dim().0
    }
}

fn rows(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (b, s_len, d) = x.dim();
    x.view()
        .into_shape_with_order((b * s_len, d))
        .expect("contiguous")
}

fn from_rows(x: Array2<f64>, b: usize, s_len: usize) -> Array3<f64> {
    let d = x.ncols();
    x.into_shape_with_order((b, s_len, d)).expect("contiguous")
}

pub fn standard_normal(shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Posterior heads applied to `fused` with explicit noise `eps` (`[M × B × S × d]`).
pub fn posterior_with_noise(
    adapter: &TaskAdapter,
    config: &ModelConfig,
    fused: &Array3<f64>,
    eps: Array4<f64>,
) -> Result<PosteriorBatch> {
    let (b, s_len, d) = fused.dim();
    ensure!(
        adapter.w_mu.dim() == (d, d),
        Shape,
        "adapter is {:?} for fused width {d}",
        adapter.w_mu.dim()
    );
    ensure!(
        eps.dim().1 == b && eps.dim().2 == s_len && eps.dim().3 == d && eps.dim().0 > 0,
        Shape,
        "noise {:?} for fused {:?}",
        eps.dim(),
        fused.dim()
    );
    ensure!(
        fused.iter().all(|v| v.is_finite()),
        InvalidArgument,
        "fused features contain NaN/Inf"
    );
    let flat = rows(fused);
    let mu = from_rows(flat.dot(&adapter.w_mu.t()), b, s_len);
    let sigma_pre = from_rows(flat.dot(&adapter.w_sigma.t()), b, s_len);
    let act = config.sigma_activation;
    let floor = config.sigma_floor;
    let sigma = sigma_pre.mapv(|p| act.apply(p) + floor);
    let mut z = eps.clone();
    for mut zm in z.outer_iter_mut() {
        Zip::from(&mut zm)
            .and(&mu)
            .and(&sigma)
            .for_each(|z, &m, &s| *z = m + s * *z);
    }
    Ok(PosteriorBatch {
        mu,
        sigma,
        sigma_pre,
        eps,
        z,
    })
}

/// Reparameterized draw of `m` samples per fused feature.
pub fn sample_posterior(
    adapter: &TaskAdapter,
    config: &ModelConfig,
    fused: &Array3<f64>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<PosteriorBatch> {
    ensure!(
        m >= 1,
        InvalidArgument,
        "need at least one Monte-Carlo sample"
    );
    let (b, s_len, d) = fused.dim();
    posterior_with_noise(
        adapter,
        config,
        fused,
        standard_normal((m, b, s_len, d), rng),
    )
}

/// Activations of one task's branch.
pub struct TaskForward {
    /// `[B × S_t × d]`, VGA output plus the text residual.
    pub fused: Array3<f64>,
    pub posterior: PosteriorBatch,
    /// `[M × B × S_t × d]` unit-norm class embeddings.
    unit: Array4<f64>,
    /// `[M × B × S_t]` norms before normalization.
    norms: Array3<f64>,
}

pub struct ForwardOutput {
    /// `[M × B × C]`
    pub logits: Array3<f64>,
    pub tasks: Vec<TaskForward>,
    vga: VgaOutput,
    image_unit: Array2<f64>,
}

/// Noise source for the forward pass.
pub enum Noise<'a, R: Rng> {
    Sample {
        samples: usize,
        rng: &'a mut R,
    },
    /// One `[M × B × S_t × d]` array per task.
    Fixed(Vec<Array4<f64>>),
}

fn check_inputs(
    state: &ModelState,
    images: ArrayView2<f64>,
    text_by_task: &[Array2<f64>],
) -> Result<()> {
    let d = state.dim();
    ensure!(
        !state.adapters.is_empty(),
        InvalidArgument,
        "model has no task adapters"
    );
    ensure!(
        images.ncols() == d,
        Shape,
        "images have width {} but model dim is {d}",
        images.ncols()
    );
    ensure!(images.nrows() > 0, Shape, "empty image batch");
    ensure!(
        text_by_task.len() == state.adapters.len(),
        Shape,
        "{} text blocks for {} adapters",
        text_by_task.len(),
        state.adapters.len()
    );
    for (i, (t, a)) in text_by_task.iter().zip(&state.adapters).enumerate() {
        ensure!(
            t.dim() == (a.num_classes(), d),
            Shape,
            "task {i}: text features {:?} but adapter owns {} classes",
            t.dim(),
            a.num_classes()
        );
    }
    ensure!(
        images.iter().all(|v| v.is_finite()),
        InvalidArgument,
        "images contain NaN/Inf"
    );
    Ok(())
}

/// Full model pass: one masked VGA pass over all tasks' queries, then per
/// task residual fusion, posterior sampling, MC fusion and scaled cosine logits.
pub fn forward_with<R: Rng>(
    state: &ModelState,
    images: ArrayView2<f64>,
    text_by_task: &[Array2<f64>],
    noise: Noise<'_, R>,
) -> Result<ForwardOutput> {
    check_inputs(state, images, text_by_task)?;
    let views: Vec<_> = text_by_task.iter().map(|t| t.view()).collect();
    let queries = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let mask = state.task_mask()?;
    let vga = vga_forward_per_image(&state.vga, queries.view(), images, mask.view())?;
    let (image_unit, _) = l2_normalize_rows(&images.to_owned());
    let b = images.nrows();
    let c_total = state.num_classes();
    let deterministic = state.config.mode == Mode::Deterministic;

    let mut noise = noise;
    let mut tasks = Vec::with_capacity(state.adapters.len());
    let mut samples: Option<usize> = None;
    for (i, adapter) in state.adapters.iter().enumerate() {
        let range = adapter.class_range.clone();
        let s_len = range.len();
        let aligned = vga.aligned.slice(s![.., range, ..]);
        let fused = &aligned + &text_by_task[i];
        let posterior = if deterministic {
            deterministic_posterior(adapter, &state.config, &fused)
        } else {
            let eps = match &mut noise {
                Noise::Fixed(v) => std::mem::replace(&mut v[i], Array4::zeros((0, 0, 0, 0))),
                Noise::Sample { samples, rng } => {
                    ensure!(
                        *samples >= 1,
                        InvalidArgument,
                        "need at least one Monte-Carlo sample"
                    );
                    standard_normal((*samples, b, s_len, state.dim()), *rng)
                }
            };
            posterior_with_noise(adapter, &state.config, &fused, eps)?
        };
        let m = posterior.num_samples();
        ensure!(
            samples.is_none_or(|prev| prev == m),
            Shape,
            "tasks disagree on the number of MC samples"
        );
        samples = Some(m);

        let mut unit = posterior.z.clone();
        let mut norms = Array3::zeros((m, b, s_len));
        for (mut um, mut nm) in unit.outer_iter_mut().zip(norms.outer_iter_mut()) {
            um += &fused;
            for (mut ub, mut nb) in um.outer_iter_mut().zip(nm.outer_iter_mut()) {
                for (mut row, n) in ub.outer_iter_mut().zip(nb.iter_mut()) {
                    *n = ops::l2_norm(row.view());
                    if *n > 0.0 {
                        row /= *n;
                    }
                }
            }
        }
        tasks.push(TaskForward {
            fused,
            posterior,
            unit,
            norms,
        });
    }

    let m = samples.unwrap_or(1);
    let inv_tau = 1.0 / state.config.temperature;
    let mut logits = Array3::zeros((m, b, c_total));
    for (adapter, task) in state.adapters.iter().zip(&tasks) {
        let start = adapter.class_range.start;
        for mi in 0..m {
            for bi in 0..b {
                let img = image_unit.row(bi);
                for (c, row) in task.unit.slice(s![mi, bi, .., ..]).outer_iter().enumerate() {
                    logits[[mi, bi, start + c]] = row.dot(&img) * inv_tau;
                }
            }
        }
    }
    Ok(ForwardOutput {
        logits,
        tasks,
        vga,
        image_unit,
    })
}

fn deterministic_posterior(
    adapter: &TaskAdapter,
    config: &ModelConfig,
    fused: &Array3<f64>,
) -> PosteriorBatch {
    let (b, s_len, d) = fused.dim();
    let mu = from_rows(rows(fused).dot(&adapter.w_mu.t()), b, s_len);
    let z = mu.clone().insert_axis(Axis(0));
    PosteriorBatch {
        sigma: Array3::from_elem(mu.raw_dim(), config.sigma_floor),
        sigma_pre: Array3::zeros(mu.raw_dim()),
        eps: Array4::zeros((1, b, s_len, d)),
        z,
        mu,
    }
}

/// Samples `m` posterior draws per task from `rng` (probabilistic mode).
pub fn forward(
    state: &ModelState,
    images: ArrayView2<f64>,
    text_by_task: &[Array2<f64>],
    m: usize,
    rng: &mut impl Rng,
) -> Result<ForwardOutput> {
    forward_with(
        state,
        images,
        text_by_task,
        Noise::Sample { samples: m, rng },
    )
}

/// Mean-only pass, `[B × C]` logits.
pub fn forward_deterministic(
    state: &ModelState,
    images: ArrayView2<f64>,
    text_by_task: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let mut det = state.clone();
    det.config.mode = Mode::Deterministic;
    let out = forward_with::<rand_chacha::ChaCha8Rng>(
        &det,
        images,
        text_by_task,
        Noise::Fixed(Vec::new()),
    )?;
    Ok(out.logits.index_axis_move(Axis(0), 0))
}

/// Softmax summary over MC samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[B × C]`
    pub mean_probs: Array2<f64>,
    /// `[B]`, entropy of each sample's softmax averaged over samples.
    pub entropy: Array1<f64>,
    /// `[B × C]`, population variance across samples.
    pub variance: Array2<f64>,
}

pub fn predict(logits: &Array3<f64>) -> Prediction {
    let (m, b, c) = logits.dim();
    let mut mean = Array2::zeros((b, c));
    let mut second = Array2::zeros((b, c));
    let mut entropy = Array1::zeros(b);
    for lm in logits.outer_iter() {
        let p = ops::softmax_rows(&lm.to_owned());
        mean += &p;
        second += &p.mapv(|v| v * v);
        for (e, row) in entropy.iter_mut().zip(p.rows()) {
            *e -= row
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>();
        }
    }
    let inv = 1.0 / m as f64;
    mean *= inv;
    second *= inv;
    entropy *= inv;
    let mut variance = second - &mean.mapv(|v| v * v);
    if m == 1 {
        variance.fill(0.0);
    } else {
        variance.mapv_inplace(|v| v.max(0.0));
    }
    Prediction {
        mean_probs: mean,
        entropy,
        variance,
    }
}

/// Gradients mirroring [`ModelState`]'s trainable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub vga: VgaParams,
    pub adapters: Vec<TaskAdapter>,
}

impl ModelGrads {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            vga: state.vga.zeros_like(),
            adapters: state
                .adapters
                .iter()
                .map(|a| TaskAdapter {
                    w_mu: Array2::zeros(a.w_mu.raw_dim()),
                    w_sigma: Array2::zeros(a.w_sigma.raw_dim()),
                    trainable: a.trainable,
                    class_range: a.class_range.clone(),
                })
                .collect(),
        }
    }
}

/// Upstream gradients entering the model outputs.
pub struct OutputGrads {
    /// `[M × B × C]`
    pub logits: Array3<f64>,
    /// Extra gradient on each task's samples `z`, `[M × B × S_t × d]`.
    pub z: Vec<Option<Array4<f64>>>,
    /// Extra gradient on each task's `mu`, `[B × S_t × d]`.
    pub mu: Vec<Option<Array3<f64>>>,
    /// Extra gradient on each task's `sigma`, `[B × S_t × d]`.
    pub sigma: Vec<Option<Array3<f64>>>,
}

impl OutputGrads {
    pub fn from_logits(logits: Array3<f64>, tasks: usize) -> Self {
        Self {
            logits,
            z: vec![None; tasks],
            mu: vec![None; tasks],
            sigma: vec![None; tasks],
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trainable {
    pub vga: bool,
    pub adapters: Vec<bool>,
}

impl Trainable {
    pub fn from_state(state: &ModelState, vga: bool) -> Self {
        Self {
            vga,
            adapters: state.adapters.iter().map(|a| a.trainable).collect(),
        }
    }
}

/// Backpropagates output gradients through adapters and (optionally) the VGA.
pub fn backward(
    state: &ModelState,
    out: &ForwardOutput,
    upstream: &OutputGrads,
    trainable: &Trainable,
) -> ModelGrads {
    let mut grads = ModelGrads::zeros_like(state);
    let (m, b, _) = out.logits.dim();
    let d = state.dim();
    let inv_tau = 1.0 / state.config.temperature;
    let deterministic = state.config.mode == Mode::Deterministic;
    let mut d_aligned = Array3::zeros(out.vga.aligned.raw_dim());

    for (i, (adapter, task)) in state.adapters.iter().zip(&out.tasks).enumerate() {
        let range = adapter.class_range.clone();
        let s_len = range.len();
        // cosine logits → unnormalized class embeddings t_m = fused + z_m
        let mut dz = Array4::zeros((m, b, s_len, d));
        for mi in 0..m {
            for bi in 0..b {
                let img = out.image_unit.row(bi);
                for c in 0..s_len {
                    let g = upstream.logits[[mi, bi, range.start + c]];
                    if g == 0.0 {
                        continue;
                    }
                    let u = task.unit.slice(s![mi, bi, c, ..]);
                    let du = &img * (g * inv_tau);
                    let dt = ops::l2_normalize_backward(u, task.norms[[mi, bi, c]], du.view());
                    dz.slice_mut(s![mi, bi, c, ..]).assign(&dt);
                }
            }
        }
        let mut dfused = dz.sum_axis(Axis(0));
        if let Some(extra) = &upstream.z[i] {
            dz += extra;
        }
        let mut dmu = dz.sum_axis(Axis(0));
        if let Some(extra) = &upstream.mu[i] {
            dmu += extra;
        }
        let fused_rows = rows(&task.fused);
        dfused += &from_rows(rows(&dmu).dot(&adapter.w_mu), b, s_len);
        let train_adapter = trainable.adapters.get(i).copied().unwrap_or(false);
        if train_adapter {
            grads.adapters[i].w_mu += &rows(&dmu).t().dot(&fused_rows);
        }
        if !deterministic {
            let post = &task.posterior;
            let mut dsigma = Array3::zeros((b, s_len, d));
            for (dzm, em) in dz.outer_iter().zip(post.eps.outer_iter()) {
                dsigma += &(&dzm * &em);
            }
            if let Some(extra) = &upstream.sigma[i] {
                dsigma += extra;
            }
            let act = state.config.sigma_activation;
            Zip::from(&mut dsigma)
                .and(&post.sigma_pre)
                .for_each(|g, &p| *g *= act.derivative(p));
            dfused += &from_rows(rows(&dsigma).dot(&adapter.w_sigma), b, s_len);
            if train_adapter {
                grads.adapters[i].w_sigma += &rows(&dsigma).t().dot(&fused_rows);
            }
        }
        d_aligned.slice_mut(s![.., range, ..]).assign(&dfused);
    }
    if trainable.vga {
        vga_backward(&state.vga, &out.vga.cache, &d_aligned, &mut grads.vga);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};

    fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = chacha(seed);
        Array::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    fn toy_state(d: usize, sizes: &[usize], seed: u64) -> (ModelState, Vec<Array2<f64>>) {
        let mut cfg = ModelConfig::for_dim(d);
        cfg.vga.ffn_dim = 2 * d;
        cfg.vga.num_heads = 2;
        let mut state = ModelState::new(cfg, seed).unwrap();
        let mut texts = Vec::new();
        for (i, &n) in sizes.iter().enumerate() {
            let tmpl = random3((n, 3, d), seed + 10 + i as u64);
            state.add_task(n, tmpl.view(), seed).unwrap();
            texts.push(crate::feature_provider::class_prototypes(&tmpl));
        }
        (state, texts)
    }

    #[test]
    fn init_single_class_formula() {
        // two identical templates [1, 1] → s_mu = [1, 1], s_sigma = 0
        let t = array![[[1.0, 1.0], [1.0, 1.0]]];
        let (w_mu, w_sigma) = init_adapter_weights(t.view()).unwrap();
        assert_eq!(w_mu, array![[0.5, 0.5], [0.5, 0.5]]);
        assert!(w_sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_needs_two_templates() {
        let t = Array3::<f64>::ones((2, 1, 4));
        assert!(init_adapter_weights(t.view()).is_none());
        let mut state = ModelState::new(ModelConfig::for_dim(4), 0).unwrap();
        state.add_task(2, t.view(), 5).unwrap();
        assert!(state.adapters[0].w_mu.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn add_task_freezes_previous_adapters() {
        let (state, _) = toy_state(8, &[2, 3, 1], 1);
        assert_eq!(state.adapters.len(), 3);
        assert_eq!(
            state
                .adapters
                .iter()
                .map(|a| a.trainable)
                .collect::<Vec<_>>(),
            vec![false, false, true]
        );
        assert_eq!(state.adapters[1].class_range, 2..5);
        assert_eq!(state.num_classes(), 6);
        let mut s = state.clone();
        assert!(s.add_task(0, Array3::zeros((0, 3, 8)).view(), 0).is_err());
    }

    #[test]
    fn adapter_parameter_accounting() {
        let mut state = ModelState::new(ModelConfig::for_dim(16), 0).unwrap();
        for _ in 0..10 {
            state.add_task(1, random3((1, 2, 16), 3).view(), 0).unwrap();
        }
        let adapters: usize = state.adapters.iter().map(|a| a.num_params()).sum();
        assert_eq!(adapters, 10 * 2 * 16 * 16);
    }

    #[test]
    fn posterior_floor_limit_and_reproducibility() {
        let (mut state, _) = toy_state(6, &[2], 3);
        state.config.sigma_activation = SigmaActivation::Relu;
        state.adapters[0].w_sigma.fill(0.0);
        let fused = random3((2, 2, 6), 4);
        let post =
            sample_posterior(&state.adapters[0], &state.config, &fused, 5, &mut chacha(1)).unwrap();
        assert!(post.sigma.iter().all(|&s| s == state.config.sigma_floor));
        for zm in post.z.outer_iter() {
            assert!((&zm - &post.mu).iter().all(|v| v.abs() < 1e-5));
        }
        let again =
            sample_posterior(&state.adapters[0], &state.config, &fused, 5, &mut chacha(1)).unwrap();
        assert_eq!(post.z, again.z);
    }

    #[test]
    fn posterior_monte_carlo_mean() {
        let (state, _) = toy_state(4, &[1], 8);
        let fused = random3((1, 1, 4), 2);
        let m = 100_000;
        let post =
            sample_posterior(&state.adapters[0], &state.config, &fused, m, &mut chacha(3)).unwrap();
        let mean = post.z.mean_axis(Axis(0)).unwrap();
        for ((&e, &mu), &sd) in mean.iter().zip(&post.mu).zip(&post.sigma) {
            assert!((e - mu).abs() <= 4.0 * sd / (m as f64).sqrt());
        }
    }

    #[test]
    fn one_class_softmax_is_one() {
        let (state, texts) = toy_state(8, &[1], 2);
        let imgs = random3((1, 3, 8), 1).index_axis_move(Axis(0), 0);
        let out = forward(&state, imgs.view(), &texts, 4, &mut chacha(0)).unwrap();
        let p = predict(&out.logits);
        assert!(p.mean_probs.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn collapsed_sigma_gives_identical_slices() {
        let (mut state, texts) = toy_state(8, &[2, 2], 5);
        state.config.sigma_activation = SigmaActivation::Relu;
        state.config.sigma_floor = 1e-12;
        for a in &mut state.adapters {
            a.w_sigma.fill(0.0);
        }
        let imgs = random3((1, 4, 8), 9).index_axis_move(Axis(0), 0);
        let out = forward(&state, imgs.view(), &texts, 3, &mut chacha(2)).unwrap();
        let first = out.logits.index_axis(Axis(0), 0).to_owned();
        for lm in out.logits.outer_iter() {
            assert!((&lm - &first).iter().all(|v| v.abs() < 1e-6));
        }
        let det = forward_deterministic(&state, imgs.view(), &texts).unwrap();
        assert_eq!(det.dim(), (4, 4));
        assert!((&det - &first).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn predict_variance_and_entropy() {
        let logits = Array3::zeros((1, 3, 2));
        let p = predict(&logits);
        assert!(p.variance.iter().all(|&v| v == 0.0));
        assert!(p.entropy.iter().all(|&e| (e - 2f64.ln()).abs() < 1e-12));

        // hand case: two samples, two images, two classes
        let logits = array![[[0.0, 1.0], [2.0, 0.0]], [[1.0, 0.0], [2.0, 0.0]]];
        let p = predict(&logits);
        let s = |a: f64, b: f64| a.exp() / (a.exp() + b.exp());
        let p01 = s(0.0, 1.0);
        let p10 = s(1.0, 0.0);
        assert_abs_diff_eq!(p.mean_probs[[0, 0]], 0.5 * (p01 + p10), epsilon = 1e-12);
        assert_abs_diff_eq!(p.mean_probs[[1, 0]], s(2.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(
            p.variance[[0, 0]],
            0.25 * (p01 - p10).powi(2),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(p.variance[[1, 1]], 0.0, epsilon = 1e-15);
        let h = |q: f64| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
        assert_abs_diff_eq!(p.entropy[0], 0.5 * (h(p01) + h(p10)), epsilon = 1e-12);
    }

    #[test]
    fn task_block_independence() {
        let (state, texts) = toy_state(8, &[2, 3], 11);
        let imgs = random3((1, 3, 8), 4).index_axis_move(Axis(0), 0);
        let base = forward(&state, imgs.view(), &texts, 2, &mut chacha(6)).unwrap();
        let mut other = state.clone();
        other.adapters[1].w_mu.mapv_inplace(|v| v * 3.0 + 0.1);
        other.adapters[1].w_sigma.mapv_inplace(|v| v - 0.2);
        let changed = forward(&other, imgs.view(), &texts, 2, &mut chacha(6)).unwrap();
        let a = base.logits.slice(s![.., .., 0..2]);
        let b = changed.logits.slice(s![.., .., 0..2]);
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        assert!((&base.logits - &changed.logits)
            .iter()
            .any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn rejects_mismatched_text() {
        let (state, mut texts) = toy_state(8, &[2], 1);
        texts[0] = Array2::zeros((3, 8));
        let imgs = Array2::ones((1, 8));
        assert!(forward(&state, imgs.view(), &texts, 2, &mut chacha(0)).is_err());
    }
}
