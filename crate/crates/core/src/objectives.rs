//! Training losses: Monte-Carlo cross-entropy, prior matching under three
//! priors, language-aware distillation of past-task samples, and the weighted
//! total with its gradient.

use ndarray::{s, Array2, Array3, Array4, ArrayView, ArrayView2, ArrayView3, Axis, Dimension, Zip};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    backward, forward_with, Mode, ModelGrads, ModelState, Noise, OutputGrads, TaskAdapter,
    Trainable,
};
use crate::error::{ensure, Error, Result};
use crate::feature_provider::class_prototypes;
use crate::ops::{self, l2_normalize_rows};
use crate::vga::{build_task_mask, vga_backward, vga_forward_multi, VgaOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlSign {
    /// `CE + λ·KL + γ·KD`: minimizing the negative ELBO.
    #[default]
    ElboConsistent,
    /// `CE − λ·KL + γ·KD`; unbounded below in σ.
    NegatedKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlReduction {
    /// Sum over the latent dimension, mean over classes and batch.
    #[default]
    SumLatent,
    /// Mean over every axis.
    MeanLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub gamma_kd: f64,
    #[serde(default)]
    pub kl_sign: KlSign,
    #[serde(default)]
    pub kl_reduction: KlReduction,
    /// Softmax temperature of the distillation logits (raw cosine when 1).
    #[serde(default = "one")]
    pub kd_temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: 0.001,
            gamma_kd: 15.0,
            kl_sign: KlSign::ElboConsistent,
            kl_reduction: KlReduction::SumLatent,
            kd_temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_kl >= 0.0,
            Config,
            "lambda_kl must be non-negative"
        );
        ensure!(
            self.gamma_kd >= 0.0,
            Config,
            "gamma_kd must be non-negative"
        );
        ensure!(
            self.kd_temperature > 0.0,
            Config,
            "distillation temperature must be positive"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Standard normal.
    #[default]
    Static,
    /// The task's own posterior conditioned on a random subset of the batch.
    DataDriven,
    /// The task's posterior computed from its hand-crafted template features.
    LanguageAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    #[serde(default = "default_context")]
    pub context_batch: usize,
}

fn default_context() -> usize {
    40
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            kind: PriorKind::Static,
            context_batch: default_context(),
        }
    }
}

/// Which training stage a loss is evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// New adapter + VGA trainable, past adapters frozen.
    Train,
    /// All adapters trainable, VGA frozen, distillation active.
    Consolidate,
}

/// Mean over samples and batch of the per-sample cross-entropy; returns the
/// loss and its gradient with respect to the logits.
pub fn cross_entropy_mc(logits: &Array3<f64>, labels: &[usize]) -> Result<(f64, Array3<f64>)> {
    let (m, b, c) = logits.dim();
    ensure!(
        labels.len() == b,
        Shape,
        "{} labels for batch of {b}",
        labels.len()
    );
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let scale = 1.0 / (m * b) as f64;
    let mut grad = Array3::zeros((m, b, c));
    let mut loss = 0.0;
    for mi in 0..m {
        for (bi, &y) in labels.iter().enumerate() {
            let row = logits.slice(s![mi, bi, ..]);
            let lse = ops::log_sum_exp(row.iter().copied());
            loss += lse - row[y];
            let mut g = grad.slice_mut(s![mi, bi, ..]);
            Zip::from(&mut g)
                .and(&row)
                .for_each(|g, &l| *g = (l - lse).exp() * scale);
            g[y] -= scale;
        }
    }
    Ok((loss * scale, grad))
}

fn check_sigma<D: Dimension>(sigma: &ArrayView<f64, D>) -> Result<()> {
    ensure!(
        sigma.iter().all(|&s| s > 0.0 && s.is_finite()),
        InvalidArgument,
        "standard deviations must be positive and finite"
    );
    Ok(())
}

fn rows_of<D: Dimension>(shape: &D) -> f64 {
    let dims = shape.slice();
    dims[..dims.len().saturating_sub(1)]
        .iter()
        .product::<usize>()
        .max(1) as f64
}

/// KL value with its gradients for `μ` and `σ`.
pub type KlGrad<D> = (f64, ndarray::Array<f64, D>, ndarray::Array<f64, D>);

/// `KL(N(μ,σ²) ‖ N(0,I))`, summed over the last axis and averaged over the rest.
pub fn kl_static<D: Dimension>(mu: ArrayView<f64, D>, sigma: ArrayView<f64, D>) -> Result<f64> {
    Ok(kl_static_grad(mu, sigma)?.0)
}

pub fn kl_static_grad<D: Dimension>(
    mu: ArrayView<f64, D>,
    sigma: ArrayView<f64, D>,
) -> Result<KlGrad<D>> {
    ensure!(
        mu.shape() == sigma.shape(),
        Shape,
        "mu {:?} vs sigma {:?}",
        mu.shape(),
        sigma.shape()
    );
    check_sigma(&sigma)?;
    let n = rows_of(&mu.raw_dim());
    let mut total = 0.0;
    Zip::from(&mu).and(&sigma).for_each(|&m, &s| {
        total += 0.5 * (m * m + s * s - 1.0 - (s * s).ln());
    });
    let dmu = mu.mapv(|m| m / n);
    let dsigma = sigma.mapv(|s| (s - 1.0 / s) / n);
    Ok((total / n, dmu, dsigma))
}

/// `KL(q ‖ p)` for diagonal Gaussians of equal shape (broadcast `p` beforehand).
pub fn kl_gaussians<D: Dimension>(
    q_mu: ArrayView<f64, D>,
    q_sigma: ArrayView<f64, D>,
    p_mu: ArrayView<f64, D>,
    p_sigma: ArrayView<f64, D>,
) -> Result<f64> {
    Ok(kl_gaussians_grad(q_mu, q_sigma, p_mu, p_sigma)?.0)
}

/// Value and gradient with respect to `q`'s parameters (the prior is a constant).
pub fn kl_gaussians_grad<D: Dimension>(
    q_mu: ArrayView<f64, D>,
    q_sigma: ArrayView<f64, D>,
    p_mu: ArrayView<f64, D>,
    p_sigma: ArrayView<f64, D>,
) -> Result<KlGrad<D>> {
    ensure!(
        q_mu.shape() == q_sigma.shape()
            && q_mu.shape() == p_mu.shape()
            && q_mu.shape() == p_sigma.shape(),
        Shape,
        "KL operands disagree: {:?}, {:?}, {:?}, {:?}",
        q_mu.shape(),
        q_sigma.shape(),
        p_mu.shape(),
        p_sigma.shape()
    );
    check_sigma(&q_sigma)?;
    check_sigma(&p_sigma)?;
    let n = rows_of(&q_mu.raw_dim());
    let mut total = 0.0;
    let mut dmu = ndarray::Array::zeros(q_mu.raw_dim());
    let mut dsigma = ndarray::Array::zeros(q_mu.raw_dim());
    Zip::from(&mut dmu)
        .and(&mut dsigma)
        .and(&q_mu)
        .and(&q_sigma)
        .and(&p_mu)
        .and(&p_sigma)
        .for_each(|gm, gs, &qm, &qs, &pm, &ps| {
            let diff = qm - pm;
            let pv = ps * ps;
            total += (ps / qs).ln() + (qs * qs + diff * diff) / (2.0 * pv) - 0.5;
            *gm = diff / pv / n;
            *gs = (qs / pv - 1.0 / qs) / n;
        });
    Ok((total / n, dmu, dsigma))
}

/// Posterior parameters of one task with a single joint context set.
pub struct JointPosterior {
    task: usize,
    vga: VgaOutput,
    fused: Array2<f64>,
    sigma_pre: Array2<f64>,
    /// `[S_t × d]`
    pub mu: Array2<f64>,
    /// `[S_t × d]`
    pub sigma: Array2<f64>,
}

/// Runs VGA with the task's `queries` against `context` (all rows attend jointly)
/// and applies that task's adapter heads.
pub fn joint_posterior(
    state: &ModelState,
    task: usize,
    queries: ArrayView2<f64>,
    context: ArrayView2<f64>,
) -> Result<JointPosterior> {
    let adapter = state
        .adapters
        .get(task)
        .ok_or_else(|| Error::InvalidArgument(format!("no adapter for task {task}")))?;
    ensure!(context.nrows() > 0, InvalidArgument, "empty context set");
    ensure!(
        queries.nrows() == adapter.num_classes(),
        Shape,
        "{} queries for a task with {} classes",
        queries.nrows(),
        adapter.num_classes()
    );
    let mask = build_task_mask(&[queries.nrows()])?;
    let vga = vga_forward_multi(&state.vga, queries, &[context], mask.view())?;
    let fused = &vga.aligned.index_axis(Axis(0), 0) + &queries;
    let mu = fused.dot(&adapter.w_mu.t());
    let (sigma_pre, sigma) = if state.config.mode == Mode::Deterministic {
        (
            Array2::zeros(mu.raw_dim()),
            Array2::from_elem(mu.raw_dim(), state.config.sigma_floor),
        )
    } else {
        let pre = fused.dot(&adapter.w_sigma.t());
        let act = state.config.sigma_activation;
        let floor = state.config.sigma_floor;
        let sigma = pre.mapv(|p| sigma_value(act, p) + floor);
        (pre, sigma)
    };
    Ok(JointPosterior {
        task,
        vga,
        fused,
        sigma_pre,
        mu,
        sigma,
    })
}

fn sigma_value(act: crate::adapters::SigmaActivation, p: f64) -> f64 {
    match act {
        crate::adapters::SigmaActivation::Softplus => ops::softplus(p),
        crate::adapters::SigmaActivation::Relu => p.max(0.0),
    }
}

fn sigma_derivative(act: crate::adapters::SigmaActivation, p: f64) -> f64 {
    match act {
        crate::adapters::SigmaActivation::Softplus => ops::sigmoid(p),
        crate::adapters::SigmaActivation::Relu => f64::from(u8::from(p > 0.0)),
    }
}

/// Accumulates gradients of a joint posterior given `dmu`, `dsigma`.
fn joint_posterior_backward(
    state: &ModelState,
    jp: &JointPosterior,
    dmu: &Array2<f64>,
    dsigma: &Array2<f64>,
    trainable: &Trainable,
    grads: &mut ModelGrads,
) {
    let adapter: &TaskAdapter = &state.adapters[jp.task];
    let train_adapter = trainable.adapters.get(jp.task).copied().unwrap_or(false);
    let mut dfused = dmu.dot(&adapter.w_mu);
    if train_adapter {
        grads.adapters[jp.task].w_mu += &dmu.t().dot(&jp.fused);
    }
    if state.config.mode == Mode::Probabilistic {
        let act = state.config.sigma_activation;
        let mut dpre = dsigma.clone();
        Zip::from(&mut dpre)
            .and(&jp.sigma_pre)
            .for_each(|g, &p| *g *= sigma_derivative(act, p));
        dfused += &dpre.dot(&adapter.w_sigma);
        if train_adapter {
            grads.adapters[jp.task].w_sigma += &dpre.t().dot(&jp.fused);
        }
    }
    if trainable.vga {
        let d_aligned = dfused.insert_axis(Axis(0));
        vga_backward(&state.vga, &jp.vga.cache, &d_aligned, &mut grads.vga);
    }
}

/// Conditional prior from a context subset of the batch, sharing the task's
/// own VGA + adapter parameters. Treated as a constant by the optimizer.
pub fn data_driven_prior(
    state: &ModelState,
    task: usize,
    task_text: ArrayView2<f64>,
    context_images: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    ensure!(
        context_images.nrows() > 0,
        InvalidArgument,
        "empty context set"
    );
    let jp = joint_posterior(state, task, task_text, context_images)?;
    Ok((jp.mu, jp.sigma))
}

/// Prior obtained by passing the hand-crafted template features through the
/// task's VGA + adapter path, with the templates as their own context.
pub fn language_aware_prior(
    state: &ModelState,
    task: usize,
    templates: ArrayView3<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (c, l, d) = templates.dim();
    ensure!(c > 0 && l > 0, InvalidArgument, "missing template features");
    let queries = class_prototypes(&templates.to_owned());
    let context = templates
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c * l, d))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let jp = joint_posterior(state, task, queries.view(), context.view())?;
    Ok((jp.mu, jp.sigma))
}

/// Unit-normalized templates, `[C × L × d]`.
fn normalized_templates(templates: ArrayView3<f64>) -> Array3<f64> {
    let mut out = templates.to_owned();
    for mut class in out.outer_iter_mut() {
        for mut row in class.outer_iter_mut() {
            let n = ops::l2_norm(row.view());
            if n > 0.0 {
                row /= n;
            }
        }
    }
    out
}

/// Class probabilities of sample sets: softmax over classes of
/// `⟨template_{c,l}, z_m⟩ / T` (unit vectors), averaged over templates and samples.
///
/// `z` is `[M × N × d]`; the result is `[N × C]`.
pub fn distill_prob(
    z: ArrayView3<f64>,
    templates: ArrayView3<f64>,
    temperature: f64,
) -> Result<Array2<f64>> {
    let (m, n, d) = z.dim();
    let (c, l, td) = templates.dim();
    ensure!(td == d, Shape, "templates have width {td}, samples {d}");
    ensure!(
        c > 0 && l > 0 && m > 0,
        InvalidArgument,
        "empty distillation inputs"
    );
    let h = normalized_templates(templates);
    let mut probs = Array2::zeros((n, c));
    let weight = 1.0 / (m * l) as f64;
    let mut logits = vec![0.0; c];
    for mi in 0..m {
        let (zu, _) = l2_normalize_rows(&z.index_axis(Axis(0), mi).to_owned());
        for (ni, zr) in zu.outer_iter().enumerate() {
            for li in 0..l {
                for (k, v) in logits.iter_mut().enumerate() {
                    *v = h.slice(s![k, li, ..]).dot(&zr) / temperature;
                }
                ops::softmax_in_place(&mut logits);
                for (k, &p) in logits.iter().enumerate() {
                    probs[[ni, k]] += weight * p;
                }
            }
        }
    }
    Ok(probs)
}

/// Language-aware distillation over past tasks. `samples[t]` holds the
/// `[M × B × S_t × d]` posterior draws of past task `t`; the sample at class
/// position `c` is scored against class `c` of the same task.
///
/// Returns the loss (summed over past classes, averaged over the batch) and a
/// gradient for each task's samples.
pub fn distill_loss(
    phase: Phase,
    samples: &[&Array4<f64>],
    templates_by_task: &[Array3<f64>],
    temperature: f64,
) -> Result<(f64, Vec<Array4<f64>>)> {
    if phase != Phase::Consolidate {
        return Err(Error::Contract(
            "distillation is only defined during memory consolidation".into(),
        ));
    }
    ensure!(
        samples.len() <= templates_by_task.len(),
        Shape,
        "{} sample sets for {} template sets",
        samples.len(),
        templates_by_task.len()
    );
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for (z, templates) in samples.iter().zip(templates_by_task) {
        let (m, b, s_len, d) = z.dim();
        let (c, l, td) = templates.dim();
        ensure!(
            c == s_len && td == d,
            Shape,
            "templates {:?} for samples {:?}",
            templates.dim(),
            z.dim()
        );
        let h = normalized_templates(templates.view());
        let mut grad = Array4::zeros(z.raw_dim());
        let inv_b = 1.0 / b as f64;
        let weight = 1.0 / (m * l) as f64;
        let mut probs = vec![vec![vec![0.0; c]; l]; m];
        let mut units = vec![ndarray::Array1::zeros(d); m];
        let mut norms = vec![0.0; m];
        for bi in 0..b {
            for target in 0..s_len {
                let mut p_target = 0.0;
                for mi in 0..m {
                    let zr = z.slice(s![mi, bi, target, ..]);
                    norms[mi] = ops::l2_norm(zr);
                    units[mi] = if norms[mi] > 0.0 {
                        &zr / norms[mi]
                    } else {
                        zr.to_owned()
                    };
                    for (li, row) in probs[mi].iter_mut().enumerate() {
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = h.slice(s![k, li, ..]).dot(&units[mi]) / temperature;
                        }
                        ops::softmax_in_place(row);
                        p_target += weight * row[target];
                    }
                }
                loss -= p_target.ln() * inv_b;
                let alpha = -inv_b * weight / p_target;
                for mi in 0..m {
                    let mut du = ndarray::Array1::<f64>::zeros(d);
                    for (li, p) in probs[mi].iter().enumerate() {
                        for k in 0..c {
                            let indicator = if k == target { 1.0 } else { 0.0 };
                            let ds = alpha * p[k] * (indicator - p[target]) / temperature;
                            du.scaled_add(ds, &h.slice(s![k, li, ..]));
                        }
                    }
                    let dz = ops::l2_normalize_backward(units[mi].view(), norms[mi], du.view());
                    grad.slice_mut(s![mi, bi, target, ..]).assign(&dz);
                }
            }
        }
        grads.push(grad);
    }
    Ok((loss, grads))
}

/// Combines the terms under the chosen sign convention. `kl_per_task` entries
/// of frozen adapters are masked out during normal training.
pub fn total_loss(
    ce: f64,
    kl_per_task: &[f64],
    kd: f64,
    weights: &LossWeights,
    kl_mask: &[bool],
) -> f64 {
    let kl: f64 = kl_per_task
        .iter()
        .zip(kl_mask.iter().chain(std::iter::repeat(&false)))
        .filter(|(_, &on)| on)
        .map(|(k, _)| k)
        .sum();
    let sign = match weights.kl_sign {
        KlSign::ElboConsistent => 1.0,
        KlSign::NegatedKl => -1.0,
    };
    ce + sign * weights.lambda_kl * kl + weights.gamma_kd * kd
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl: Vec<f64>,
    pub kd: f64,
    /// `[B × C]` logits averaged over samples.
    #[serde(skip)]
    pub mean_logits: Array2<f64>,
}

/// Everything one objective evaluation needs besides the model.
pub struct ObjectiveInputs<'a> {
    pub images: ArrayView2<'a, f64>,
    /// Output positions of the true classes.
    pub labels: &'a [usize],
    pub text_by_task: &'a [Array2<f64>],
    pub templates_by_task: &'a [Array3<f64>],
    pub phase: Phase,
    pub prior: PriorSpec,
    pub weights: LossWeights,
    /// Batch rows forming the data-driven context set.
    pub context_rows: Option<&'a [usize]>,
    /// Fixed prior parameters per task; bypasses prior computation.
    pub prior_override: Option<&'a [(Array2<f64>, Array2<f64>)]>,
}

/// Picks a random context subset strictly smaller than the batch.
pub fn pick_context_rows(batch: usize, context_batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = context_batch.min(batch.saturating_sub(1)).max(1).min(batch);
    let mut rows = sample(rng, batch, k).into_vec();
    rows.sort_unstable();
    rows
}

/// Which tasks contribute prior matching in this phase.
pub fn kl_mask(state: &ModelState, phase: Phase) -> Vec<bool> {
    match phase {
        Phase::Train => state.adapters.iter().map(|a| a.trainable).collect(),
        Phase::Consolidate => vec![true; state.adapters.len()],
    }
}

/// Evaluates the total objective and its gradient for the parameters marked trainable.
pub fn loss_and_grads<R: Rng>(
    state: &ModelState,
    inputs: &ObjectiveInputs<'_>,
    noise: Noise<'_, R>,
    trainable: &Trainable,
) -> Result<(LossBreakdown, ModelGrads)> {
    inputs.weights.validate()?;
    let out = forward_with(state, inputs.images, inputs.text_by_task, noise)?;
    let (ce, dlogits) = cross_entropy_mc(&out.logits, inputs.labels)?;
    let tasks = state.adapters.len();
    let mut upstream = OutputGrads::from_logits(dlogits, tasks);
    let mask = kl_mask(state, inputs.phase);
    let probabilistic = state.config.mode == Mode::Probabilistic;
    let kl_scale = match inputs.weights.kl_sign {
        KlSign::ElboConsistent => inputs.weights.lambda_kl,
        KlSign::NegatedKl => -inputs.weights.lambda_kl,
    };
    let mut kl = vec![0.0; tasks];
    let mut joint_terms = Vec::new();
    let latent = match inputs.weights.kl_reduction {
        KlReduction::SumLatent => 1.0,
        KlReduction::MeanLatent => 1.0 / state.dim() as f64,
    };

    if probabilistic {
        for t in 0..tasks {
            if !mask[t] {
                continue;
            }
            let post = &out.tasks[t].posterior;
            // the data-driven prior is only used while a task is first learned
            let kind = match (inputs.phase, inputs.prior.kind) {
                (Phase::Consolidate, PriorKind::DataDriven) => PriorKind::Static,
                (_, k) => k,
            };
            let prior = match (inputs.prior_override, kind) {
                (Some(fixed), _) => Some(fixed[t].clone()),
                (None, PriorKind::Static) => None,
                (None, PriorKind::LanguageAware) => Some(language_aware_prior(
                    state,
                    t,
                    inputs.templates_by_task[t].view(),
                )?),
                (None, PriorKind::DataDriven) => {
                    let rows = inputs.context_rows.ok_or_else(|| {
                        Error::Contract("data-driven prior needs context rows".into())
                    })?;
                    let context = inputs.images.select(Axis(0), rows);
                    Some(data_driven_prior(
                        state,
                        t,
                        inputs.text_by_task[t].view(),
                        context.view(),
                    )?)
                }
            };
            if kind == PriorKind::DataDriven {
                // the target conditions on the whole batch as one context set
                let (pm, ps) = prior.expect("data-driven prior is always computed");
                let target =
                    joint_posterior(state, t, inputs.text_by_task[t].view(), inputs.images)?;
                let (v, dmu, dsigma) =
                    kl_gaussians_grad(target.mu.view(), target.sigma.view(), pm.view(), ps.view())?;
                kl[t] = v * latent;
                joint_terms.push((
                    target,
                    dmu * (kl_scale * latent),
                    dsigma * (kl_scale * latent),
                ));
                continue;
            }
            let (v, dmu, dsigma) = match prior {
                None => kl_static_grad(post.mu.view(), post.sigma.view())?,
                Some((pm, ps)) => kl_gaussians_grad(
                    post.mu.view(),
                    post.sigma.view(),
                    pm.broadcast(post.mu.raw_dim()).expect("prior broadcast"),
                    ps.broadcast(post.mu.raw_dim()).expect("prior broadcast"),
                )?,
            };
            kl[t] = v * latent;
            upstream.mu[t] = Some(dmu * (kl_scale * latent));
            upstream.sigma[t] = Some(dsigma * (kl_scale * latent));
        }
    }

    let mut kd = 0.0;
    if inputs.phase == Phase::Consolidate && tasks > 1 && inputs.weights.gamma_kd > 0.0 {
        let past: Vec<&Array4<f64>> = out.tasks[..tasks - 1]
            .iter()
            .map(|t| &t.posterior.z)
            .collect();
        let (value, dz) = distill_loss(
            inputs.phase,
            &past,
            &inputs.templates_by_task[..tasks - 1],
            inputs.weights.kd_temperature,
        )?;
        kd = value;
        for (t, g) in dz.into_iter().enumerate() {
            upstream.z[t] = Some(g * inputs.weights.gamma_kd);
        }
    }

    let total = total_loss(ce, &kl, kd, &inputs.weights, &mask);
    let mean_logits = out.logits.mean_axis(Axis(0)).expect("at least one sample");
    let mut grads = backward(state, &out, &upstream, trainable);
    for (jp, dmu, dsigma) in &joint_terms {
        joint_posterior_backward(state, jp, dmu, dsigma, trainable, &mut grads);
    }
    Ok((
        LossBreakdown {
            total,
            ce,
            kl,
            kd,
            mean_logits,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cross_entropy_cases() {
        let logits = Array3::from_shape_fn((1, 1, 3), |(_, _, c)| if c == 1 { 100.0 } else { 0.0 });
        assert!(cross_entropy_mc(&logits, &[1]).unwrap().0 < 1e-30);
        let uniform = Array3::zeros((2, 4, 10));
        assert_abs_diff_eq!(
            cross_entropy_mc(&uniform, &[0, 3, 9, 5]).unwrap().0,
            10f64.ln(),
            epsilon = 1e-12
        );
        assert!(cross_entropy_mc(&uniform, &[0, 3, 10, 5]).is_err());
    }

    #[test]
    fn cross_entropy_two_sample_hand_case() {
        let logits = array![[[1.0, 0.0]], [[0.0, 2.0]]];
        let ce = |a: f64, b: f64| -(a.exp() / (a.exp() + b.exp())).ln();
        let expected = 0.5 * (ce(1.0, 0.0) + ce(0.0, 2.0));
        assert_abs_diff_eq!(
            cross_entropy_mc(&logits, &[0]).unwrap().0,
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_static_closed_forms() {
        assert_eq!(
            kl_static(array![0.0].view(), array![1.0].view()).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            kl_static(array![1.0].view(), array![1.0].view()).unwrap(),
            0.5
        );
        let v = kl_static(array![0.0].view(), array![2.0].view()).unwrap();
        assert_abs_diff_eq!(v, 0.5 * (4.0 - 1.0 - 4f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.806_852_819_440_054_7, epsilon = 1e-12);
        assert!(kl_static(array![0.0].view(), array![0.0].view()).is_err());
    }

    #[test]
    fn kl_static_reduction_sums_latent_and_averages_rows() {
        let mu = array![[1.0, 1.0], [0.0, 0.0]];
        let sigma = Array2::ones((2, 2));
        // rows contribute 1.0 and 0.0
        assert_abs_diff_eq!(kl_static(mu.view(), sigma.view()).unwrap(), 0.5);
    }

    #[test]
    fn kl_gaussians_closed_forms() {
        let z = array![0.0];
        let o = array![1.0];
        assert_eq!(
            kl_gaussians(z.view(), o.view(), z.view(), o.view()).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            kl_gaussians(z.view(), o.view(), o.view(), o.view()).unwrap(),
            0.5
        );
        assert!(kl_gaussians(z.view(), z.view(), z.view(), o.view()).is_err());
    }

    #[test]
    fn kl_gaussians_matches_monte_carlo() {
        let mut rng = chacha(17);
        let q_mu = array![0.3, -0.2, 0.5];
        let q_s = array![0.7, 1.2, 0.9];
        let p_mu = array![0.0, 0.4, -0.3];
        let p_s = array![1.1, 0.8, 1.5];
        let exact = kl_gaussians(q_mu.view(), q_s.view(), p_mu.view(), p_s.view()).unwrap();
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..3 {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = q_mu[i] + q_s[i] * e;
                let lq = -((z - q_mu[i]) / q_s[i]).powi(2) / 2.0 - q_s[i].ln();
                let lp = -((z - p_mu[i]) / p_s[i]).powi(2) / 2.0 - p_s[i].ln();
                acc += lq - lp;
            }
        }
        assert!((acc / n as f64 - exact).abs() < 1e-2);
    }

    #[test]
    fn distill_prob_cases() {
        let t1 = Array3::from_elem((1, 2, 3), 0.5);
        let z = Array3::from_shape_fn((2, 4, 3), |(m, n, d)| (m + n + d) as f64 - 1.5);
        let p = distill_prob(z.view(), t1.view(), 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // z aligned with class 0's template, other class orthogonal; sharp temperature
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 0]] = 1.0;
        t[[1, 0, 1]] = 1.0;
        let z = array![[[3.0, 0.0]]];
        let p = distill_prob(z.view(), t.view(), 0.01).unwrap();
        assert!(p[[0, 0]] > 0.999);
    }

    #[test]
    fn distill_prob_hand_case_and_row_sums() {
        // M=2, L=2, two classes, unit vectors
        let t = array![[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]];
        let z = array![[[1.0, 0.0]], [[0.0, 2.0]]];
        let p = distill_prob(z.view(), t.view(), 1.0).unwrap();
        let sm = |a: f64, b: f64| a.exp() / (a.exp() + b.exp());
        // sample 1 = e0: template 0 logits (1, 0); template 1 logits (0, 1)
        // sample 2 = e1: template 0 logits (0, 1); template 1 logits (1, 0)
        let expected = 0.25 * (sm(1.0, 0.0) + sm(0.0, 1.0) + sm(0.0, 1.0) + sm(1.0, 0.0));
        assert_abs_diff_eq!(p[[0, 0]], expected, epsilon = 1e-12);
        let mut rng = chacha(4);
        let z = Array3::from_shape_simple_fn((3, 5, 4), || StandardNormal.sample(&mut rng));
        let t = Array3::from_shape_simple_fn((6, 2, 4), || StandardNormal.sample(&mut rng));
        let p = distill_prob(z.view(), t.view(), 1.0).unwrap();
        for row in p.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn distill_loss_cases() {
        // one-hot correct: sharp temperature makes P_KD → 1
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 0]] = 1.0;
        t[[1, 0, 1]] = 1.0;
        let mut z = Array4::zeros((1, 1, 2, 2));
        z[[0, 0, 0, 0]] = 1.0;
        z[[0, 0, 1, 1]] = 1.0;
        let (loss, _) = distill_loss(Phase::Consolidate, &[&z], &[t.clone()], 1e-3).unwrap();
        assert!(loss < 1e-12);

        // uniform: identical templates for 10 classes
        let t10 = Array3::from_elem((10, 2, 3), 1.0);
        let z10 = Array4::from_elem((2, 1, 10, 3), 0.3);
        let (loss, _) = distill_loss(Phase::Consolidate, &[&z10], &[t10], 1.0).unwrap();
        assert_abs_diff_eq!(loss, 10.0 * 10f64.ln(), epsilon = 1e-10);

        assert!(matches!(
            distill_loss(Phase::Train, &[&z], &[t], 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn distill_loss_two_task_hand_sum() {
        let mut rng = chacha(8);
        let mut draw = |shape: (usize, usize, usize, usize)| {
            Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
        };
        let z1 = draw((2, 3, 2, 4));
        let z2 = draw((2, 3, 3, 4));
        let t1 = draw((2, 2, 1, 4)).into_shape_with_order((2, 2, 4)).unwrap();
        let t2 = draw((3, 2, 1, 4)).into_shape_with_order((3, 2, 4)).unwrap();
        let (loss, _) = distill_loss(
            Phase::Consolidate,
            &[&z1, &z2],
            &[t1.clone(), t2.clone()],
            1.0,
        )
        .unwrap();
        let mut expected = 0.0;
        for (z, t) in [(&z1, &t1), (&z2, &t2)] {
            for b in 0..3 {
                let zb = z.slice(s![.., b, .., ..]);
                for c in 0..t.dim().0 {
                    let zc = zb.slice(s![.., c..c + 1, ..]);
                    let p = distill_prob(zc, t.view(), 1.0).unwrap();
                    expected -= p[[0, c]].ln() / 3.0;
                }
            }
        }
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let mut rng = chacha(21);
        let z = Array4::from_shape_simple_fn((2, 2, 3, 4), || StandardNormal.sample(&mut rng));
        let t = Array3::from_shape_simple_fn((3, 2, 4), || StandardNormal.sample(&mut rng));
        let (_, g) =
            distill_loss(Phase::Consolidate, &[&z], std::slice::from_ref(&t), 0.5).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 1, 2)] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fp = distill_loss(Phase::Consolidate, &[&zp], std::slice::from_ref(&t), 0.5)
                .unwrap()
                .0;
            let fm = distill_loss(Phase::Consolidate, &[&zm], std::slice::from_ref(&t), 0.5)
                .unwrap()
                .0;
            assert_abs_diff_eq!((fp - fm) / (2.0 * h), g[0][idx], epsilon = 1e-6);
        }
    }

    #[test]
    fn total_loss_conventions() {
        let w = LossWeights {
            lambda_kl: 0.0,
            gamma_kd: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(1.25, &[3.0], 2.0, &w, &[true]), 1.25);
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, &[5.0, 7.0], 0.0, &w, &[false, false]), 1.0);
        let elbo = total_loss(1.0, &[5.0, 7.0], 0.1, &w, &[true, true]);
        let literal = total_loss(
            1.0,
            &[5.0, 7.0],
            0.1,
            &LossWeights {
                kl_sign: KlSign::NegatedKl,
                ..w
            },
            &[true, true],
        );
        assert_abs_diff_eq!(elbo - literal, 2.0 * 0.001 * 12.0, epsilon = 1e-15);
    }

    #[test]
    fn context_rows_are_a_strict_subset() {
        let mut rng = chacha(0);
        let rows = pick_context_rows(64, 40, &mut rng);
        assert_eq!(rows.len(), 40);
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pick_context_rows(10, 40, &mut rng).len(), 9);
        assert_eq!(pick_context_rows(1, 40, &mut rng), vec![0]);
        let _ = Array1::<f64>::zeros(1);
    }

    fn toy_state(d: usize, sizes: &[usize]) -> (ModelState, Vec<Array2<f64>>, Vec<Array3<f64>>) {
        let mut rng = chacha(31);
        let mut state = ModelState::new(crate::adapters::ModelConfig::for_dim(d), 5).unwrap();
        let mut texts = Vec::new();
        let mut templates = Vec::new();
        for &n in sizes {
            let t = Array3::from_shape_simple_fn((n, 3, d), || StandardNormal.sample(&mut rng));
            state.add_task(n, t.view(), 2).unwrap();
            texts.push(class_prototypes(&t));
            templates.push(t);
        }
        (state, texts, templates)
    }

    #[test]
    fn data_driven_kl_vanishes_with_full_context() {
        let (state, texts, templates) = toy_state(6, &[2, 3]);
        let mut rng = chacha(32);
        let images = Array2::from_shape_simple_fn((5, 6), || StandardNormal.sample(&mut rng));
        let labels = [0, 1, 2, 3, 4];
        let all: Vec<usize> = (0..5).collect();
        let trainable = Trainable::from_state(&state, true);
        let inputs = ObjectiveInputs {
            images: images.view(),
            labels: &labels,
            text_by_task: &texts,
            templates_by_task: &templates,
            phase: Phase::Train,
            prior: PriorSpec {
                kind: PriorKind::DataDriven,
                context_batch: 5,
            },
            weights: LossWeights::default(),
            context_rows: Some(&all),
            prior_override: None,
        };
        let (loss, _) = loss_and_grads(
            &state,
            &inputs,
            Noise::Sample {
                samples: 2,
                rng: &mut rng,
            },
            &trainable,
        )
        .unwrap();
        for kl in loss.kl {
            assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_latent_reduction_divides_by_dim() {
        let (state, texts, templates) = toy_state(6, &[2]);
        let mut rng = chacha(33);
        let images = Array2::from_shape_simple_fn((3, 6), || StandardNormal.sample(&mut rng));
        let trainable = Trainable::from_state(&state, true);
        let kl_with = |reduction| {
            let inputs = ObjectiveInputs {
                images: images.view(),
                labels: &[0, 1, 0],
                text_by_task: &texts,
                templates_by_task: &templates,
                phase: Phase::Train,
                prior: PriorSpec::default(),
                weights: LossWeights {
                    kl_reduction: reduction,
                    ..LossWeights::default()
                },
                context_rows: None,
                prior_override: None,
            };
            let (loss, _) = loss_and_grads(
                &state,
                &inputs,
                Noise::Sample {
                    samples: 2,
                    rng: &mut chacha(34),
                },
                &trainable,
            )
            .unwrap();
            loss.kl[0]
        };
        let sum = kl_with(KlReduction::SumLatent);
        assert!(sum > 0.0);
        assert_abs_diff_eq!(kl_with(KlReduction::MeanLatent), sum / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn language_prior_ignores_template_order() {
        let (state, _, templates) = toy_state(6, &[3]);
        let (mu, sigma) = language_aware_prior(&state, 0, templates[0].view()).unwrap();
        let mut reversed = templates[0].clone();
        reversed.invert_axis(Axis(1));
        let (mu_r, sigma_r) = language_aware_prior(&state, 0, reversed.view()).unwrap();
        assert!((&mu - &mu_r).iter().all(|v| v.abs() < 1e-12));
        assert!((&sigma - &sigma_r).iter().all(|v| v.abs() < 1e-12));
    }
}
