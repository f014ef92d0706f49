//! Visual-guided attention: a post-norm transformer decoder block where class
//! text features are the queries and image features are the keys/values.
//!
//! Queries of different tasks are kept apart by a block-diagonal additive mask
//! on the self-attention, so a single pass over all tasks' queries gives the
//! same result as one pass per task.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ops::{self, LayerNormCache};
use crate::params::{
    join, push_matrix, push_matrix_mut, push_vector, push_vector_mut, ParamMut, ParamRef,
    Parameters,
};
use crate::rng::chacha;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VgaConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub final_norm: bool,
}

impl Default for VgaConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            num_layers: 1,
            num_heads: 8,
            ffn_dim: 2048,
            final_norm: false,
        }
    }
}

impl VgaConfig {
    /// Default layout scaled to a feature width: feed-forward is `4·dim`, and
    /// the head count is the default when it divides `dim`.
    pub fn for_dim(dim: usize) -> Self {
        let num_heads = [8, 4, 2, 1]
            .into_iter()
            .find(|h| dim.is_multiple_of(*h))
            .unwrap_or(1);
        Self {
            dim,
            num_heads,
            ffn_dim: 4 * dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.dim > 0 && self.num_layers > 0 && self.num_heads > 0 && self.ffn_dim > 0,
            Config,
            "VGA dimensions must be positive: {self:?}"
        );
        ensure!(
            self.dim.is_multiple_of(self.num_heads),
            Config,
            "dim {} not divisible by {} heads",
            self.dim,
            self.num_heads
        );
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// Exact parameter count of a VGA stack.
pub fn param_count(config: &VgaConfig) -> usize {
    let d = config.dim;
    let f = config.ffn_dim;
    let attention = 4 * (d * d + d);
    let per_layer = 2 * attention + (d * f + f) + (f * d + d) + 3 * 2 * d;
    config.num_layers * per_layer + if config.final_norm { 2 * d } else { 0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn xavier(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out, inp), |_| rng.gen_range(-bound..bound)),
            bias: Array1::zeros(out),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        ops::linear(x, self.weight.view(), Some(self.bias.view()))
    }

    fn backward(&self, dy: ArrayView2<f64>, x: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        ops::linear_backward(
            dy,
            x,
            self.weight.view(),
            &mut grad.weight,
            Some(&mut grad.bias),
        )
    }
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_matrix(out, join(prefix, "weight"), &self.weight);
        push_vector(out, join(prefix, "bias"), &self.bias);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_matrix_mut(out, join(prefix, "weight"), &mut self.weight);
        push_vector_mut(out, join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        ops::layer_norm(x, self.gamma.view(), self.beta.view())
    }

    fn backward(
        &self,
        dy: ArrayView2<f64>,
        cache: &LayerNormCache,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        ops::layer_norm_backward(
            dy,
            cache,
            self.gamma.view(),
            &mut grad.gamma,
            &mut grad.beta,
        )
    }
}

impl Parameters for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_vector(out, join(prefix, "weight"), &self.gamma);
        push_vector(out, join(prefix, "bias"), &self.beta);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_vector_mut(out, join(prefix, "weight"), &mut self.gamma);
        push_vector_mut(out, join(prefix, "bias"), &mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    fn zeros(d: usize) -> Self {
        Self {
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            out: Linear::zeros(d, d),
        }
    }

    fn xavier(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::xavier(d, d, rng),
            k: Linear::xavier(d, d, rng),
            v: Linear::xavier(d, d, rng),
            out: Linear::xavier(d, d, rng),
        }
    }
}

impl Parameters for Attention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.out.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.q.collect_mut(&join(prefix, "q"), out);
        self.k.collect_mut(&join(prefix, "k"), out);
        self.v.collect_mut(&join(prefix, "v"), out);
        self.out.collect_mut(&join(prefix, "out"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
}

impl Parameters for DecoderLayer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.self_attn.collect(&join(prefix, "self_attn"), out);
        self.cross_attn.collect(&join(prefix, "cross_attn"), out);
        self.ffn_in.collect(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect(&join(prefix, "ffn_out"), out);
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.norm3.collect(&join(prefix, "norm3"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.self_attn.collect_mut(&join(prefix, "self_attn"), out);
        self.cross_attn
            .collect_mut(&join(prefix, "cross_attn"), out);
        self.ffn_in.collect_mut(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect_mut(&join(prefix, "ffn_out"), out);
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.norm3.collect_mut(&join(prefix, "norm3"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VgaParams {
    pub config: VgaConfig,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl VgaParams {
    /// Xavier-uniform projections, unit/zero norms.
    pub fn init(config: VgaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = chacha(seed);
        let (d, f) = (config.dim, config.ffn_dim);
        let layers = (0..config.num_layers)
            .map(|_| DecoderLayer {
                self_attn: Attention::xavier(d, &mut rng),
                cross_attn: Attention::xavier(d, &mut rng),
                ffn_in: Linear::xavier(d, f, &mut rng),
                ffn_out: Linear::xavier(f, d, &mut rng),
                norm1: LayerNorm::identity(d),
                norm2: LayerNorm::identity(d),
                norm3: LayerNorm::identity(d),
            })
            .collect();
        let mut params = Self {
            config,
            layers,
            final_norm: config.final_norm.then(|| LayerNorm::identity(d)),
        };
        params.round_to_f32();
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        let (d, f) = (self.config.dim, self.config.ffn_dim);
        Self {
            config: self.config,
            layers: (0..self.layers.len())
                .map(|_| DecoderLayer {
                    self_attn: Attention::zeros(d),
                    cross_attn: Attention::zeros(d),
                    ffn_in: Linear::zeros(d, f),
                    ffn_out: Linear::zeros(f, d),
                    norm1: LayerNorm::zeros(d),
                    norm2: LayerNorm::zeros(d),
                    norm3: LayerNorm::zeros(d),
                })
                .collect(),
            final_norm: self.final_norm.as_ref().map(|_| LayerNorm::zeros(d)),
        }
    }
}

impl Parameters for VgaParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&join(prefix, &format!("layers.{i}")), out);
        }
        if let Some(n) = &self.final_norm {
            n.collect(&join(prefix, "final_norm"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_mut(&join(prefix, &format!("layers.{i}")), out);
        }
        if let Some(n) = &mut self.final_norm {
            n.collect_mut(&join(prefix, "final_norm"), out);
        }
    }
}

/// Additive self-attention mask: `0` inside each task block, `-∞` across blocks.
pub fn build_task_mask(task_sizes: &[usize]) -> Result<Array2<f64>> {
    ensure!(
        !task_sizes.is_empty(),
        InvalidArgument,
        "mask needs at least one task"
    );
    ensure!(
        task_sizes.iter().all(|&s| s > 0),
        InvalidArgument,
        "task sizes must be positive: {task_sizes:?}"
    );
    let total: usize = task_sizes.iter().sum();
    let mut mask = Array2::from_elem((total, total), f64::NEG_INFINITY);
    let mut start = 0;
    for &size in task_sizes {
        mask.slice_mut(s![start..start + size, start..start + size])
            .fill(0.0);
        start += size;
    }
    Ok(mask)
}

/// Residual fusion of aligned features with the (broadcast) text features.
pub fn fuse_residual(aligned: &Array3<f64>, text: &Array2<f64>) -> Result<Array3<f64>> {
    let (_, s_len, d) = aligned.dim();
    ensure!(
        text.dim() == (s_len, d),
        Shape,
        "text features {:?} do not match aligned {:?}",
        text.dim(),
        aligned.dim()
    );
    Ok(aligned + text)
}

/// Hidden query states: one `[S×d]` block shared by all contexts, or a stacked
/// `[B·S × d]` matrix with one block per context.
#[derive(Clone)]
struct Hidden {
    data: Array2<f64>,
    shared: bool,
}

impl Hidden {
    fn num_blocks(&self, contexts: usize) -> usize {
        if self.shared {
            1
        } else {
            contexts
        }
    }

    fn stacked(&self, contexts: usize) -> Array2<f64> {
        if self.shared {
            let views: Vec<_> = (0..contexts).map(|_| self.data.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("same widths")
        } else {
            self.data.clone()
        }
    }
}

/// Sums the per-context gradient blocks back into a shared block when needed.
fn reduce_to(h: &Hidden, grad_stacked: Array2<f64>, s_len: usize, contexts: usize) -> Array2<f64> {
    if h.shared {
        let mut acc = Array2::zeros((s_len, grad_stacked.ncols()));
        for b in 0..contexts {
            acc += &grad_stacked.slice(s![b * s_len..(b + 1) * s_len, ..]);
        }
        acc
    } else {
        grad_stacked
    }
}

struct HeadProbs(Vec<Array2<f64>>);

fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: Option<ArrayView2<f64>>,
    heads: usize,
) -> (Array2<f64>, HeadProbs) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if let Some(m) = mask {
            scores += &m;
        }
        let p = ops::softmax_rows(&scores);
        out.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    (out, HeadProbs(probs))
}

/// Accumulates gradients of one attention block into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
fn attend_backward(
    dout: ArrayView2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: &HeadProbs,
    mut dq: ndarray::ArrayViewMut2<f64>,
    mut dk: ndarray::ArrayViewMut2<f64>,
    mut dv: ndarray::ArrayViewMut2<f64>,
) {
    let heads = probs.0.len();
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for (h, p) in probs.0.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h = dout.slice(cols);
        let mut dv_h = dv.slice_mut(cols);
        dv_h += &p.t().dot(&dout_h);
        let dp = dout_h.dot(&v.slice(cols).t());
        let ds = ops::softmax_rows_backward(p, &dp) * scale;
        let mut dq_h = dq.slice_mut(cols);
        dq_h += &ds.dot(&k.slice(cols));
        let mut dk_h = dk.slice_mut(cols);
        dk_h += &ds.t().dot(&q.slice(cols));
    }
}

struct SelfAttnCache {
    input: Hidden,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<HeadProbs>,
    concat: Array2<f64>,
    norm: LayerNormCache,
}

struct CrossAttnCache {
    input: Hidden,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<HeadProbs>,
    concat: Array2<f64>,
    norm: LayerNormCache,
}

struct FfnCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    norm: LayerNormCache,
}

struct LayerCache {
    sa: SelfAttnCache,
    ca: CrossAttnCache,
    ffn: FfnCache,
}

/// Saved activations of a forward pass.
pub struct VgaCache {
    s_len: usize,
    contexts: Vec<Array2<f64>>,
    ctx_offsets: Vec<usize>,
    ctx_stacked: Array2<f64>,
    layers: Vec<LayerCache>,
    final_norm: Option<LayerNormCache>,
}

pub struct VgaOutput {
    /// `[contexts × S × d]`
    pub aligned: Array3<f64>,
    pub cache: VgaCache,
}

fn check_finite(name: &str, x: ArrayView2<f64>) -> Result<()> {
    ensure!(
        x.iter().all(|v| v.is_finite()),
        InvalidArgument,
        "{name} contains NaN/Inf"
    );
    Ok(())
}

/// Runs the decoder with `queries` once per context set. Each context set
/// (rows = image features) yields its own aligned copy of all queries.
pub fn vga_forward_multi(
    params: &VgaParams,
    queries: ArrayView2<f64>,
    contexts: &[ArrayView2<f64>],
    mask: ArrayView2<f64>,
) -> Result<VgaOutput> {
    let d = params.config.dim;
    let heads = params.config.num_heads;
    let s_len = queries.nrows();
    ensure!(s_len > 0, Shape, "no queries");
    ensure!(!contexts.is_empty(), Shape, "no context sets");
    ensure!(
        queries.ncols() == d,
        Shape,
        "queries have width {} but VGA dim is {d}",
        queries.ncols()
    );
    ensure!(
        mask.dim() == (s_len, s_len),
        Shape,
        "mask {:?} for {s_len} queries",
        mask.dim()
    );
    check_finite("queries", queries)?;
    let mut ctx_offsets = Vec::with_capacity(contexts.len() + 1);
    ctx_offsets.push(0);
    for c in contexts {
        ensure!(
            c.ncols() == d && c.nrows() > 0,
            Shape,
            "context {:?} does not match dim {d}",
            c.dim()
        );
        check_finite("context", *c)?;
        ctx_offsets.push(ctx_offsets.last().unwrap() + c.nrows());
    }
    let ctx_stacked =
        ndarray::concatenate(Axis(0), contexts).map_err(|e| Error::Shape(e.to_string()))?;
    let n_ctx = contexts.len();

    let mut h = Hidden {
        data: queries.to_owned(),
        shared: true,
    };
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        // masked self-attention over the queries of each block
        let sa_in = h.clone();
        let q = layer.self_attn.q.forward(h.data.view());
        let k = layer.self_attn.k.forward(h.data.view());
        let v = layer.self_attn.v.forward(h.data.view());
        let nb = h.num_blocks(n_ctx);
        let mut concat = Array2::zeros(h.data.raw_dim());
        let mut sa_probs = Vec::with_capacity(nb);
        for b in 0..nb {
            let rows = s![b * s_len..(b + 1) * s_len, ..];
            let (o, p) = attend(
                q.slice(rows),
                k.slice(rows),
                v.slice(rows),
                Some(mask),
                heads,
            );
            concat.slice_mut(rows).assign(&o);
            sa_probs.push(p);
        }
        let sa_out = layer.self_attn.out.forward(concat.view());
        let (x1, n1) = layer.norm1.forward((&h.data + &sa_out).view());
        h = Hidden {
            data: x1,
            shared: h.shared,
        };

        // cross-attention from queries to each context set
        let ca_in = h.clone();
        let cq = layer.cross_attn.q.forward(h.data.view());
        let ck = layer.cross_attn.k.forward(ctx_stacked.view());
        let cv = layer.cross_attn.v.forward(ctx_stacked.view());
        let mut cconcat = Array2::zeros((n_ctx * s_len, d));
        let mut ca_probs = Vec::with_capacity(n_ctx);
        for b in 0..n_ctx {
            let qb = if h.shared {
                cq.view()
            } else {
                cq.slice(s![b * s_len..(b + 1) * s_len, ..])
            };
            let crow = s![ctx_offsets[b]..ctx_offsets[b + 1], ..];
            let (o, p) = attend(qb, ck.slice(crow), cv.slice(crow), None, heads);
            cconcat
                .slice_mut(s![b * s_len..(b + 1) * s_len, ..])
                .assign(&o);
            ca_probs.push(p);
        }
        let ca_out = layer.cross_attn.out.forward(cconcat.view());
        let (x2, n2) = layer.norm2.forward((&h.stacked(n_ctx) + &ca_out).view());

        // position-wise feed-forward
        let pre = layer.ffn_in.forward(x2.view());
        let act = pre.mapv(|v| v.max(0.0));
        let ff = layer.ffn_out.forward(act.view());
        let (x3, n3) = layer.norm3.forward((&x2 + &ff).view());
        h = Hidden {
            data: x3,
            shared: false,
        };

        caches.push(LayerCache {
            sa: SelfAttnCache {
                input: sa_in,
                q,
                k,
                v,
                probs: sa_probs,
                concat,
                norm: n1,
            },
            ca: CrossAttnCache {
                input: ca_in,
                q: cq,
                k: ck,
                v: cv,
                probs: ca_probs,
                concat: cconcat,
                norm: n2,
            },
            ffn: FfnCache {
                input: x2,
                pre,
                act,
                norm: n3,
            },
        });
    }
    let (out, final_cache) = match &params.final_norm {
        Some(n) => {
            let (y, c) = n.forward(h.data.view());
            (y, Some(c))
        }
        None => (h.data, None),
    };
    let aligned = out
        .into_shape_with_order((n_ctx, s_len, d))
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(VgaOutput {
        aligned,
        cache: VgaCache {
            s_len,
            contexts: contexts.iter().map(|c| c.to_owned()).collect(),
            ctx_offsets,
            ctx_stacked,
            layers: caches,
            final_norm: final_cache,
        },
    })
}

/// Single context set: `[S×d]` aligned queries.
pub fn vga_forward(
    params: &VgaParams,
    queries: ArrayView2<f64>,
    context: ArrayView2<f64>,
    mask: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let out = vga_forward_multi(params, queries, &[context], mask)?;
    Ok(out.aligned.index_axis_move(Axis(0), 0))
}

/// Every image is its own one-row context: `[B×S×d]`.
pub fn vga_forward_per_image(
    params: &VgaParams,
    queries: ArrayView2<f64>,
    images: ArrayView2<f64>,
    mask: ArrayView2<f64>,
) -> Result<VgaOutput> {
    let contexts: Vec<_> = (0..images.nrows())
        .map(|b| images.slice(s![b..b + 1, ..]))
        .collect();
    vga_forward_multi(params, queries, &contexts, mask)
}

/// Accumulates parameter gradients given `d_aligned` (`[contexts × S × d]`).
pub fn vga_backward(
    params: &VgaParams,
    cache: &VgaCache,
    d_aligned: &Array3<f64>,
    grad: &mut VgaParams,
) {
    let d = params.config.dim;
    let n_ctx = cache.contexts.len();
    let s_len = cache.s_len;
    let mut dh = d_aligned
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n_ctx * s_len, d))
        .expect("contiguous gradient");
    if let (Some(n), Some(c)) = (&params.final_norm, &cache.final_norm) {
        dh = n.backward(
            dh.view(),
            c,
            grad.final_norm.as_mut().expect("grad mirrors params"),
        );
    }

    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grad.layers[li];

        // feed-forward
        let dr3 = layer.norm3.backward(dh.view(), &lc.ffn.norm, &mut g.norm3);
        let dact = layer
            .ffn_out
            .backward(dr3.view(), lc.ffn.act.view(), &mut g.ffn_out);
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&lc.ffn.pre)
            .for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        let mut dx2 = layer
            .ffn_in
            .backward(dpre.view(), lc.ffn.input.view(), &mut g.ffn_in);
        dx2 += &dr3;

        // cross-attention
        let ca = &lc.ca;
        let dr2 = layer.norm2.backward(dx2.view(), &ca.norm, &mut g.norm2);
        let dconcat =
            layer
                .cross_attn
                .out
                .backward(dr2.view(), ca.concat.view(), &mut g.cross_attn.out);
        let mut dcq = Array2::zeros(ca.q.raw_dim());
        let mut dck = Array2::zeros(ca.k.raw_dim());
        let mut dcv = Array2::zeros(ca.v.raw_dim());
        for b in 0..n_ctx {
            let qrows = if ca.input.shared {
                s![0..s_len, ..]
            } else {
                s![b * s_len..(b + 1) * s_len, ..]
            };
            let crow = s![cache.ctx_offsets[b]..cache.ctx_offsets[b + 1], ..];
            attend_backward(
                dconcat.slice(s![b * s_len..(b + 1) * s_len, ..]),
                ca.q.slice(qrows),
                ca.k.slice(crow),
                ca.v.slice(crow),
                &ca.probs[b],
                dcq.slice_mut(qrows),
                dck.slice_mut(crow),
                dcv.slice_mut(crow),
            );
        }
        layer
            .cross_attn
            .k
            .backward(dck.view(), cache.ctx_stacked.view(), &mut g.cross_attn.k);
        layer
            .cross_attn
            .v
            .backward(dcv.view(), cache.ctx_stacked.view(), &mut g.cross_attn.v);
        let mut dx1 =
            layer
                .cross_attn
                .q
                .backward(dcq.view(), ca.input.data.view(), &mut g.cross_attn.q);
        dx1 += &reduce_to(&ca.input, dr2, s_len, n_ctx);

        // masked self-attention
        let sa = &lc.sa;
        let dr1 = layer.norm1.backward(dx1.view(), &sa.norm, &mut g.norm1);
        let dconcat =
            layer
                .self_attn
                .out
                .backward(dr1.view(), sa.concat.view(), &mut g.self_attn.out);
        let mut dq = Array2::zeros(sa.q.raw_dim());
        let mut dk = Array2::zeros(sa.k.raw_dim());
        let mut dv = Array2::zeros(sa.v.raw_dim());
        for (b, probs) in sa.probs.iter().enumerate() {
            let rows = s![b * s_len..(b + 1) * s_len, ..];
            attend_backward(
                dconcat.slice(rows),
                sa.q.slice(rows),
                sa.k.slice(rows),
                sa.v.slice(rows),
                probs,
                dq.slice_mut(rows),
                dk.slice_mut(rows),
                dv.slice_mut(rows),
            );
        }
        let x = sa.input.data.view();
        let mut dx = layer.self_attn.q.backward(dq.view(), x, &mut g.self_attn.q);
        dx += &layer.self_attn.k.backward(dk.view(), x, &mut g.self_attn.k);
        dx += &layer.self_attn.v.backward(dv.view(), x, &mut g.self_attn.v);
        dx += &dr1;
        // Gradient w.r.t. the layer input; the first layer's input is the
        // constant query matrix, so only deeper layers consume it.
        dh = if li > 0 { dx } else { Array2::zeros((0, d)) };
    }
}
