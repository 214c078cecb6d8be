//! Language model: token embedding, pre-norm residual layers of
//! (shared block, SwiGLU MLP), final norm and an untied output head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::block::{
    block_forward_graph, init_block_params, is_mode_exclusive, BlockDims, BlockTrace, BlockVariant, MixerMode,
    MixerPair, OryxBlockParams,
};
use crate::error::{Error, Result};
use crate::ops::{self, NORM_EPS};
use crate::real::{Precision, Real};
use crate::rng::SeededRng;
use crate::schedule::ModeSchedule;
use crate::tensor::Tensor;

fn default_expansion() -> f64 {
    8.0 / 3.0
}

fn default_true() -> bool {
    true
}

fn default_conv_width() -> usize {
    4
}

fn default_rope_base() -> f64 {
    ops::DEFAULT_ROPE_BASE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_head: usize,
    #[serde(default)]
    pub variant: BlockVariant,
    pub chunk: usize,
    #[serde(default = "default_expansion")]
    pub mlp_expansion: f64,
    /// Disables the channel mixers (single-block probes).
    #[serde(default = "default_true")]
    pub use_mlp: bool,
    #[serde(default = "default_conv_width")]
    pub conv_width: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Small defaults for a given mixer pair.
    pub fn small(pair: MixerPair) -> Self {
        Self {
            vocab_size: 64,
            d_model: 128,
            n_layers: 4,
            d_head: 16,
            variant: BlockVariant::for_pair(pair),
            chunk: 16,
            mlp_expansion: default_expansion(),
            use_mlp: true,
            conv_width: 4,
            rope_base: ops::DEFAULT_ROPE_BASE,
            precision: Precision::F32,
            seed: 0,
        }
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims { d_model: self.d_model, d_head: self.d_head, conv_width: self.conv_width, rope_base: self.rope_base }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_expansion * self.d_model as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocabulary must be non-empty".into()));
        }
        if self.chunk == 0 {
            return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
        }
        if self.use_mlp && self.mlp_hidden() == 0 {
            return Err(Error::InvalidConfig("MLP hidden width rounds to zero".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::InvalidConfig(format!("rope base {} must exceed 1", self.rope_base)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm_mix: T,
    pub block: OryxBlockParams<T>,
    pub norm_mlp: Option<T>,
    pub mlp: Option<MlpParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: T,
    pub head: T,
}

impl<T> ModelParams<T> {
    /// Visits every leaf in a fixed order with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("embedding".into(), &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layers.{i}.norm_mix"), &l.norm_mix);
            l.block.visit(&format!("layers.{i}.block."), f);
            if let Some(n) = &l.norm_mlp {
                f(format!("layers.{i}.norm_mlp"), n);
            }
            if let Some(m) = &l.mlp {
                f(format!("layers.{i}.mlp.w_gate"), &m.w_gate);
                f(format!("layers.{i}.mlp.w_up"), &m.w_up);
                f(format!("layers.{i}.mlp.w_down"), &m.w_down);
            }
        }
        f("final_norm".into(), &self.final_norm);
        f("head".into(), &self.head);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        f("embedding".into(), &mut self.embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layers.{i}.norm_mix"), &mut l.norm_mix);
            l.block.visit_mut(&format!("layers.{i}.block."), f);
            if let Some(n) = &mut l.norm_mlp {
                f(format!("layers.{i}.norm_mlp"), n);
            }
            if let Some(m) = &mut l.mlp {
                f(format!("layers.{i}.mlp.w_gate"), &mut m.w_gate);
                f(format!("layers.{i}.mlp.w_up"), &mut m.w_up);
                f(format!("layers.{i}.mlp.w_down"), &mut m.w_down);
            }
        }
        f("final_norm".into(), &mut self.final_norm);
        f("head".into(), &mut self.head);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            embedding: f("embedding", &self.embedding),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerParams {
                    norm_mix: f(&format!("layers.{i}.norm_mix"), &l.norm_mix),
                    block: l.block.map(&format!("layers.{i}.block."), f),
                    norm_mlp: l.norm_mlp.as_ref().map(|n| f(&format!("layers.{i}.norm_mlp"), n)),
                    mlp: l.mlp.as_ref().map(|m| MlpParams {
                        w_gate: f(&format!("layers.{i}.mlp.w_gate"), &m.w_gate),
                        w_up: f(&format!("layers.{i}.mlp.w_up"), &m.w_up),
                        w_down: f(&format!("layers.{i}.mlp.w_down"), &m.w_down),
                    }),
                })
                .collect(),
            final_norm: f("final_norm", &self.final_norm),
            head: f("head", &self.head),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl<F: Real> ModelParams<Tensor<F>> {
    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Registers every tensor as a trainable leaf.
    pub fn to_graph(&self, g: &mut Graph<F>) -> ModelParams<Var> {
        self.map(&mut |_, t| g.param(t.clone()))
    }

    pub fn cast<G: Real>(&self) -> ModelParams<Tensor<G>> {
        self.map(&mut |_, t| t.cast())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }
}

fn trunc_matrix<F: Real>(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Tensor<F> {
    let data = (0..rows * cols).map(|_| F::of(rng.trunc_normal(std, 3.0))).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape")
}

pub const INIT_STD: f64 = 0.02;

/// Deterministic initialization from `rng`.
pub fn init_params<F: Real>(config: &ModelConfig, rng: &mut SeededRng) -> Result<ModelParams<Tensor<F>>> {
    config.validate()?;
    let d = config.d_model;
    let residual = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
    let dims = config.dims();
    let embedding = trunc_matrix(config.vocab_size, d, INIT_STD, rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let block = init_block_params(&dims, &config.variant, residual, rng);
        let mlp = config.use_mlp.then(|| {
            let h = config.mlp_hidden();
            MlpParams {
                w_gate: trunc_matrix(d, h, INIT_STD, rng),
                w_up: trunc_matrix(d, h, INIT_STD, rng),
                w_down: trunc_matrix(h, d, INIT_STD * residual, rng),
            }
        });
        layers.push(LayerParams {
            norm_mix: Tensor::full(&[d], F::one()),
            block,
            norm_mlp: config.use_mlp.then(|| Tensor::full(&[d], F::one())),
            mlp,
        });
    }
    Ok(ModelParams {
        embedding,
        layers,
        final_norm: Tensor::full(&[d], F::one()),
        head: trunc_matrix(d, config.vocab_size, INIT_STD, rng),
    })
}

pub fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().position(|&t| t >= vocab) {
        Some(position) => Err(Error::TokenOutOfRange { token: tokens[position], position, vocab }),
        None => Ok(()),
    }
}

pub struct LayerTrace {
    /// Normalized block input.
    pub block_in: Var,
    pub block: BlockTrace,
}

pub struct ForwardTrace {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

/// Differentiable forward over `tokens.len() / seq_len` stacked sequences.
/// Row `r` uses the attention mixer when `attn_rows[r]`.
pub fn model_forward_graph<F: Real>(
    g: &mut Graph<F>,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    tokens: &[usize],
    seq_len: usize,
    attn_rows: &[bool],
) -> Result<ForwardTrace> {
    check_tokens(tokens, config.vocab_size)?;
    if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) || attn_rows.len() != tokens.len() {
        return Err(Error::ScheduleMismatch { schedule: attn_rows.len(), sequence: tokens.len() });
    }
    let dims = config.dims();
    let mut x = g.embedding(params.embedding, tokens);
    let mut traces = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let h = g.rms_norm(x, layer.norm_mix, NORM_EPS);
        let trace = block_forward_graph(g, h, attn_rows, seq_len, &layer.block, &config.variant, &dims);
        x = g.add(x, trace.y);
        if let (Some(norm), Some(mlp)) = (layer.norm_mlp, &layer.mlp) {
            let h = g.rms_norm(x, norm, NORM_EPS);
            let gate = g.matmul(h, mlp.w_gate);
            let gate = g.silu(gate);
            let up = g.matmul(h, mlp.w_up);
            let hidden = g.mul(gate, up);
            let out = g.matmul(hidden, mlp.w_down);
            x = g.add(x, out);
        }
        traces.push(LayerTrace { block_in: h, block: trace });
    }
    let xf = g.rms_norm(x, params.final_norm, NORM_EPS);
    let logits = g.matmul(xf, params.head);
    Ok(ForwardTrace { logits, layers: traces })
}

/// Logits `[T x vocab]` for one sequence under a chunk schedule.
pub fn model_forward<F: Real>(
    tokens: &[usize],
    schedule: &ModeSchedule,
    params: &ModelParams<Tensor<F>>,
    config: &ModelConfig,
) -> Result<Tensor<F>> {
    schedule.check_covers(tokens.len())?;
    check_tokens(tokens, config.vocab_size)?;
    if tokens.is_empty() {
        return Ok(Tensor::zeros(&[0, config.vocab_size]));
    }
    let mut g = Graph::new();
    let p = params.map(&mut |_, t| g.constant(t.clone()));
    let rows: Vec<bool> = schedule.per_position().iter().map(|m| *m == MixerMode::Attention).collect();
    let trace = model_forward_graph(&mut g, &p, config, tokens, tokens.len(), &rows)?;
    let logits = g.value(trace.logits).clone();
    logits.check_finite("logits")?;
    Ok(logits)
}

/// Mean of `-log softmax(logits)[target]` over rows.
pub fn cross_entropy_loss<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    if logits.rows() != targets.len() {
        return Err(Error::ScheduleMismatch { schedule: targets.len(), sequence: logits.rows() });
    }
    if targets.is_empty() {
        return Ok(F::zero());
    }
    check_tokens(targets, logits.cols())?;
    let mut total = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        total += lse - row[t];
    }
    Ok(total / F::of(targets.len() as f64))
}

/// Closed-form parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub embedding: usize,
    /// Non-embedding parameters used by both mixer modes.
    pub shared: usize,
    pub attention_only: usize,
    pub linear_only: usize,
    /// `shared / (shared + exclusive)` for the mode with more exclusive
    /// parameters, embedding excluded.
    pub shared_fraction: f64,
}

/// Block leaves as (name, element count), shared-vs-exclusive decided by
/// [`is_mode_exclusive`].
fn block_shapes(config: &ModelConfig) -> Vec<(&'static str, usize)> {
    let d = config.d_model;
    let h = config.d_model / config.d_head;
    let v = &config.variant;
    let mut out = vec![("w_q_attn", d * d)];
    if !v.shared_query {
        out.push(("w_q_lin", d * d));
    }
    out.extend([("w_k", d * d), ("w_v", d * d), ("w_g", d * d), ("w_o", d * d)]);
    if v.use_conv {
        let c = config.conv_width * d + d;
        out.extend([("conv_k", c), ("conv_v", c)]);
    }
    out.extend([("support.w_dt", d * h), ("support.dt_bias", h), ("support.a_log", h)]);
    if v.pair == MixerPair::Tg {
        out.push(("support.w_beta", d * h));
    }
    out.push(("norm_scale", d));
    out
}

pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    config.validate()?;
    if config.n_layers == 0 {
        return Err(Error::InvalidConfig("shared fraction is undefined without layers".into()));
    }
    let d = config.d_model;
    let embedding = config.vocab_size * d;
    let (mut shared, mut attention_only, mut linear_only) = (0, 0, 0);
    for (name, n) in block_shapes(config) {
        if !is_mode_exclusive(name) {
            shared += n;
        } else if name == "w_q_attn" {
            if config.variant.shared_query {
                shared += n;
            } else {
                attention_only += n;
            }
        } else {
            linear_only += n;
        }
    }
    let mlp = if config.use_mlp { 3 * d * config.mlp_hidden() + d } else { 0 };
    shared = (shared + d + mlp) * config.n_layers + d + d * config.vocab_size;
    attention_only *= config.n_layers;
    linear_only *= config.n_layers;
    let exclusive = attention_only.max(linear_only);
    Ok(ParamCount {
        total: embedding + shared + attention_only + linear_only,
        embedding,
        shared,
        attention_only,
        linear_only,
        shared_fraction: shared as f64 / (shared + exclusive) as f64,
    })
}

/// Per-layer decode memory in elements: the recurrent state is fixed,
/// the KV cache grows by `kv_per_token` each position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSize {
    pub recurrent_elements: usize,
    pub kv_elements_per_token: usize,
}

pub fn state_size(config: &ModelConfig) -> StateSize {
    StateSize {
        recurrent_elements: config.n_layers * config.d_model * config.d_head,
        kv_elements_per_token: config.n_layers * 2 * config.d_model,
    }
}
