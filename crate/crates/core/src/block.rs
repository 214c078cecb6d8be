//! The shared multi-mixer block.
//!
//! Keys and values come from one set of projections and feed both the
//! attention KV cache and the linear recurrent state. Each mixer owns its
//! query projection; the linear mixer additionally owns its decay (and,
//! for the delta rule, write-strength) projections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SeqLayout, Var};
use crate::error::{shape_err, Error, Result};
use crate::mixers::{attention_decode_step, KvCache, LinearRule, RecurrentState};
use crate::ops::{self, sigmoid, silu, softplus, NORM_EPS};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::schedule::ModeSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerMode {
    Attention,
    Linear,
}

/// Which linear mixer is paired with attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerPair {
    /// Attention + Mamba-2.
    Tm,
    /// Attention + gated delta rule.
    Tg,
}

impl MixerPair {
    pub fn rule(self) -> LinearRule {
        match self {
            MixerPair::Tm => LinearRule::Mamba2,
            MixerPair::Tg => LinearRule::Gdn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopePolicy {
    /// Both queries and the shared key.
    Both,
    /// Only the attention query and the attention view of the key.
    AttentionOnly,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkNormPolicy {
    Off,
    LinearOnly,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Silu,
}

/// Output normalization. `Rms` normalizes the gated output as a whole;
/// `Group` normalizes each head before gating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockVariant {
    pub pair: MixerPair,
    pub shared_query: bool,
    pub use_conv: bool,
    pub use_gate: bool,
    pub rope_policy: RopePolicy,
    pub qk_norm_policy: QkNormPolicy,
    pub conv_activation: Activation,
    pub query_activation: Activation,
    pub norm_kind: NormKind,
}

impl BlockVariant {
    pub fn tm() -> Self {
        Self {
            pair: MixerPair::Tm,
            shared_query: false,
            use_conv: true,
            use_gate: true,
            rope_policy: RopePolicy::Both,
            qk_norm_policy: QkNormPolicy::Off,
            conv_activation: Activation::Identity,
            query_activation: Activation::Identity,
            norm_kind: NormKind::Rms,
        }
    }

    pub fn tg() -> Self {
        Self {
            pair: MixerPair::Tg,
            shared_query: false,
            use_conv: true,
            use_gate: true,
            rope_policy: RopePolicy::AttentionOnly,
            qk_norm_policy: QkNormPolicy::LinearOnly,
            conv_activation: Activation::Silu,
            query_activation: Activation::Silu,
            norm_kind: NormKind::Group,
        }
    }

    pub fn for_pair(pair: MixerPair) -> Self {
        match pair {
            MixerPair::Tm => Self::tm(),
            MixerPair::Tg => Self::tg(),
        }
    }

    fn rope_for(&self, mode: MixerMode) -> bool {
        match (self.rope_policy, mode) {
            (RopePolicy::Both, _) => true,
            (RopePolicy::AttentionOnly, MixerMode::Attention) => true,
            _ => false,
        }
    }

    fn l2_for(&self, mode: MixerMode) -> bool {
        match (self.qk_norm_policy, mode) {
            (QkNormPolicy::Both, _) => true,
            (QkNormPolicy::LinearOnly, MixerMode::Linear) => true,
            _ => false,
        }
    }
}

impl Default for BlockVariant {
    fn default() -> Self {
        Self::tm()
    }
}

/// Geometry of one block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_head: usize,
    pub conv_width: usize,
    pub rope_base: f64,
}

impl BlockDims {
    pub fn heads(&self) -> usize {
        self.d_model / self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_head == 0 || !self.d_model.is_multiple_of(self.d_head) {
            return Err(Error::InvalidConfig(format!(
                "model width {} is not a multiple of head width {}",
                self.d_model, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::OddDimension(self.d_head));
        }
        if self.conv_width == 0 {
            return Err(Error::InvalidConfig("conv width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `width x channels`; row `j` taps position `t - j`.
    pub w: T,
    pub b: T,
}

/// Per-position gate projections of the linear mixer.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportParams<T> {
    pub w_dt: T,
    pub dt_bias: T,
    pub a_log: T,
    /// Delta-rule write strength; absent for Mamba-2.
    pub w_beta: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OryxBlockParams<T> {
    pub w_q_attn: T,
    /// Absent when the variant shares one query projection.
    pub w_q_lin: Option<T>,
    pub w_k: T,
    pub w_v: T,
    pub w_g: T,
    pub w_o: T,
    pub conv_k: Option<ConvParams<T>>,
    pub conv_v: Option<ConvParams<T>>,
    pub support: SupportParams<T>,
    pub norm_scale: T,
}

impl<T> OryxBlockParams<T> {
    /// Visits every leaf with a stable dotted name.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        let n = |s: &str| format!("{prefix}{s}");
        f(n("w_q_attn"), &self.w_q_attn);
        if let Some(w) = &self.w_q_lin {
            f(n("w_q_lin"), w);
        }
        f(n("w_k"), &self.w_k);
        f(n("w_v"), &self.w_v);
        f(n("w_g"), &self.w_g);
        f(n("w_o"), &self.w_o);
        if let Some(c) = &self.conv_k {
            f(n("conv_k.w"), &c.w);
            f(n("conv_k.b"), &c.b);
        }
        if let Some(c) = &self.conv_v {
            f(n("conv_v.w"), &c.w);
            f(n("conv_v.b"), &c.b);
        }
        f(n("support.w_dt"), &self.support.w_dt);
        f(n("support.dt_bias"), &self.support.dt_bias);
        f(n("support.a_log"), &self.support.a_log);
        if let Some(w) = &self.support.w_beta {
            f(n("support.w_beta"), w);
        }
        f(n("norm_scale"), &self.norm_scale);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        let n = |s: &str| format!("{prefix}{s}");
        f(n("w_q_attn"), &mut self.w_q_attn);
        if let Some(w) = &mut self.w_q_lin {
            f(n("w_q_lin"), w);
        }
        f(n("w_k"), &mut self.w_k);
        f(n("w_v"), &mut self.w_v);
        f(n("w_g"), &mut self.w_g);
        f(n("w_o"), &mut self.w_o);
        if let Some(c) = &mut self.conv_k {
            f(n("conv_k.w"), &mut c.w);
            f(n("conv_k.b"), &mut c.b);
        }
        if let Some(c) = &mut self.conv_v {
            f(n("conv_v.w"), &mut c.w);
            f(n("conv_v.b"), &mut c.b);
        }
        f(n("support.w_dt"), &mut self.support.w_dt);
        f(n("support.dt_bias"), &mut self.support.dt_bias);
        f(n("support.a_log"), &mut self.support.a_log);
        if let Some(w) = &mut self.support.w_beta {
            f(n("support.w_beta"), w);
        }
        f(n("norm_scale"), &mut self.norm_scale);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> OryxBlockParams<U> {
        let n = |s: &str| format!("{prefix}{s}");
        let conv = |c: &Option<ConvParams<T>>, name: &str, f: &mut dyn FnMut(&str, &T) -> U| {
            c.as_ref().map(|c| ConvParams { w: f(&n(&format!("{name}.w")), &c.w), b: f(&n(&format!("{name}.b")), &c.b) })
        };
        OryxBlockParams {
            w_q_attn: f(&n("w_q_attn"), &self.w_q_attn),
            w_q_lin: self.w_q_lin.as_ref().map(|w| f(&n("w_q_lin"), w)),
            w_k: f(&n("w_k"), &self.w_k),
            w_v: f(&n("w_v"), &self.w_v),
            w_g: f(&n("w_g"), &self.w_g),
            w_o: f(&n("w_o"), &self.w_o),
            conv_k: conv(&self.conv_k, "conv_k", f),
            conv_v: conv(&self.conv_v, "conv_v", f),
            support: SupportParams {
                w_dt: f(&n("support.w_dt"), &self.support.w_dt),
                dt_bias: f(&n("support.dt_bias"), &self.support.dt_bias),
                a_log: f(&n("support.a_log"), &self.support.a_log),
                w_beta: self.support.w_beta.as_ref().map(|w| f(&n("support.w_beta"), w)),
            },
            norm_scale: f(&n("norm_scale"), &self.norm_scale),
        }
    }

    fn q_for(&self, mode: MixerMode) -> &T {
        match (mode, &self.w_q_lin) {
            (MixerMode::Linear, Some(w)) => w,
            _ => &self.w_q_attn,
        }
    }
}

/// Names of leaves used by only one mixer mode.
pub fn is_mode_exclusive(name: &str) -> bool {
    name.ends_with("w_q_attn") || name.ends_with("w_q_lin") || name.contains("support.")
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Random initialization. Projections draw from a normal truncated at
/// three standard deviations; the output projection is scaled down by
/// `residual_scale`.
pub fn init_block_params<F: Real>(
    dims: &BlockDims,
    variant: &BlockVariant,
    residual_scale: f64,
    rng: &mut SeededRng,
) -> OryxBlockParams<Tensor<F>> {
    const STD: f64 = 0.02;
    let d = dims.d_model;
    let h = dims.heads();
    let mat = |rows: usize, cols: usize, std: f64, rng: &mut SeededRng| {
        let data = (0..rows * cols).map(|_| F::of(rng.trunc_normal(std, 3.0))).collect();
        Tensor::from_vec(&[rows, cols], data).expect("shape")
    };
    let w_q_attn = mat(d, d, STD, rng);
    let w_q_lin = (!variant.shared_query).then(|| mat(d, d, STD, rng));
    let w_k = mat(d, d, STD, rng);
    let w_v = mat(d, d, STD, rng);
    let w_g = mat(d, d, STD, rng);
    let w_o = mat(d, d, STD * residual_scale, rng);
    let bound = 1.0 / (dims.conv_width as f64).sqrt();
    let conv = |rng: &mut SeededRng| ConvParams {
        w: rng.uniform_tensor(&[dims.conv_width, d], -bound, bound),
        b: Tensor::zeros(&[d]),
    };
    let (conv_k, conv_v) = if variant.use_conv { (Some(conv(rng)), Some(conv(rng))) } else { (None, None) };
    let w_dt = mat(d, h, STD, rng);
    let dt_bias = (0..h)
        .map(|_| {
            let dt = (rng.uniform_range(0.001f64.ln(), 0.1f64.ln())).exp();
            F::of(inv_softplus(dt))
        })
        .collect();
    let a_log = (0..h).map(|_| F::of(rng.uniform_range(1.0, 16.0).ln())).collect();
    let w_beta = (variant.pair == MixerPair::Tg).then(|| mat(d, h, STD, rng));
    OryxBlockParams {
        w_q_attn,
        w_q_lin,
        w_k,
        w_v,
        w_g,
        w_o,
        conv_k,
        conv_v,
        support: SupportParams {
            w_dt,
            dt_bias: Tensor::from_vec(&[h], dt_bias).expect("shape"),
            a_log: Tensor::from_vec(&[h], a_log).expect("shape"),
            w_beta,
        },
        norm_scale: Tensor::full(&[d], F::one()),
    }
}

fn activate<F: Real>(x: Tensor<F>, act: Activation) -> Tensor<F> {
    match act {
        Activation::Identity => x,
        Activation::Silu => x.map(silu),
    }
}

/// Shared keys and values for a sequence starting at position 0.
pub fn compute_shared_kv<F: Real>(
    x: &Tensor<F>,
    params: &OryxBlockParams<Tensor<F>>,
    variant: &BlockVariant,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut k = x.matmul(&params.w_k)?;
    let mut v = x.matmul(&params.w_v)?;
    if variant.use_conv {
        let (ck, cv) = conv_pair(params)?;
        k = ops::causal_depthwise_conv(&k, &ck.w, &ck.b)?;
        v = ops::causal_depthwise_conv(&v, &cv.w, &cv.b)?;
    }
    Ok((activate(k, variant.conv_activation), activate(v, variant.conv_activation)))
}

fn conv_pair<F: Real>(
    params: &OryxBlockParams<Tensor<F>>,
) -> Result<(&ConvParams<Tensor<F>>, &ConvParams<Tensor<F>>)> {
    match (&params.conv_k, &params.conv_v) {
        (Some(k), Some(v)) => Ok((k, v)),
        _ => Err(Error::InvalidConfig("variant uses a convolution but parameters have none".into())),
    }
}

pub fn compute_query<F: Real>(
    x: &Tensor<F>,
    params: &OryxBlockParams<Tensor<F>>,
    variant: &BlockVariant,
    mode: MixerMode,
) -> Result<Tensor<F>> {
    let w = if variant.shared_query { &params.w_q_attn } else { params.q_for(mode) };
    Ok(activate(x.matmul(w)?, variant.query_activation))
}

/// Mode-specific views of a query and the shared key. Row `r` sits at
/// position `start + r`.
pub fn apply_positional_and_norm_policy<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    variant: &BlockVariant,
    mode: MixerMode,
    dims: &BlockDims,
    start: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (mut q, mut k) = (q.clone(), k.clone());
    if variant.rope_for(mode) {
        q = ops::rope_apply_heads(&q, dims.d_head, dims.rope_base, start)?;
        k = ops::rope_apply_heads(&k, dims.d_head, dims.rope_base, start)?;
    }
    if variant.l2_for(mode) {
        q = ops::l2_normalize_groups(&q, dims.d_head, NORM_EPS)?;
        k = ops::l2_normalize_groups(&k, dims.d_head, NORM_EPS)?;
    }
    Ok((q, k))
}

/// Normalized, optionally gated, output projection.
pub fn gated_output<F: Real>(
    o: &Tensor<F>,
    g_pre: &Tensor<F>,
    params: &OryxBlockParams<Tensor<F>>,
    variant: &BlockVariant,
    dims: &BlockDims,
) -> Result<Tensor<F>> {
    if o.shape() != g_pre.shape() {
        return Err(shape_err("gated_output", format!("{:?} vs {:?}", o.shape(), g_pre.shape())));
    }
    let gate = |t: Tensor<F>| -> Result<Tensor<F>> {
        if variant.use_gate {
            t.zip_map(g_pre, |a, g| a * silu(g))
        } else {
            Ok(t)
        }
    };
    let mixed = match variant.norm_kind {
        NormKind::Rms => ops::rms_norm(&gate(o.clone())?, &params.norm_scale, NORM_EPS)?,
        NormKind::Group => gate(ops::group_norm(o, &params.norm_scale, dims.d_head, NORM_EPS)?)?,
    };
    mixed.matmul(&params.w_o)
}

/// Per-position log decays and (for the delta rule) write strengths,
/// both `rows x heads`.
pub fn support_gates<F: Real>(
    x: &Tensor<F>,
    params: &OryxBlockParams<Tensor<F>>,
) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
    let sp = &params.support;
    let mut la = x.matmul(&sp.w_dt)?;
    let h = la.cols();
    for r in 0..la.rows() {
        for (c, v) in la.row_mut(r).iter_mut().enumerate() {
            *v = -softplus(*v + sp.dt_bias.data()[c]) * sp.a_log.data()[c].exp();
        }
    }
    let beta = match &sp.w_beta {
        Some(w) => Some(x.matmul(w)?.map(sigmoid)),
        None => None,
    };
    debug_assert_eq!(h, sp.a_log.len());
    Ok((la, beta))
}

/// Graph nodes produced by [`block_forward_graph`], kept so callers can
/// read intermediate activations.
pub struct BlockTrace {
    pub y: Var,
    pub k_pre: Var,
    pub v_pre: Var,
    pub v: Var,
    pub k_attn: Var,
    pub k_lin: Var,
    pub log_alpha: Var,
    pub beta: Option<Var>,
}

fn graph_act<F: Real>(g: &mut Graph<F>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Silu => g.silu(x),
    }
}

/// Differentiable block forward over `n_seq` sequences of `seq_len` rows
/// stacked in `x`. Row `r` reads the attention output when
/// `attn_rows[r]`, otherwise the linear output.
pub fn block_forward_graph<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    attn_rows: &[bool],
    seq_len: usize,
    p: &OryxBlockParams<Var>,
    variant: &BlockVariant,
    dims: &BlockDims,
) -> BlockTrace {
    let layout = SeqLayout { seq_len, heads: dims.heads() };
    let k_pre = g.matmul(x, p.w_k);
    let v_pre = g.matmul(x, p.w_v);
    let (mut k, mut v) = (k_pre, v_pre);
    if let (Some(ck), Some(cv)) = (&p.conv_k, &p.conv_v) {
        k = g.causal_conv(k, ck.w, ck.b, seq_len);
        v = g.causal_conv(v, cv.w, cv.b, seq_len);
    }
    let k = graph_act(g, k, variant.conv_activation);
    let v = graph_act(g, v, variant.conv_activation);

    let view = |g: &mut Graph<F>, t: Var, mode: MixerMode| {
        let mut t = t;
        if variant.rope_for(mode) {
            t = g.rope(t, dims.d_head, dims.rope_base, seq_len);
        }
        if variant.l2_for(mode) {
            t = g.l2_norm(t, dims.d_head, NORM_EPS);
        }
        t
    };
    let k_attn = view(g, k, MixerMode::Attention);
    let k_lin = if variant.rope_for(MixerMode::Linear) == variant.rope_for(MixerMode::Attention)
        && variant.l2_for(MixerMode::Linear) == variant.l2_for(MixerMode::Attention)
    {
        k_attn
    } else {
        view(g, k, MixerMode::Linear)
    };
    let pre = g.matmul(x, p.support.w_dt);
    let pre = g.add_bias(pre, p.support.dt_bias);
    let log_alpha = g.log_decay(pre, p.support.a_log);
    let beta = p.support.w_beta.map(|w| {
        let b = g.matmul(x, w);
        g.sigmoid(b)
    });

    let any_attn = attn_rows.iter().any(|&a| a);
    let any_lin = attn_rows.iter().any(|&a| !a);
    let query = |g: &mut Graph<F>, mode: MixerMode| {
        let w = if variant.shared_query { p.w_q_attn } else { *p.q_for(mode) };
        let q = g.matmul(x, w);
        let q = graph_act(g, q, variant.query_activation);
        view(g, q, mode)
    };
    let o_attn = any_attn.then(|| {
        let q = query(g, MixerMode::Attention);
        g.attention(q, k_attn, v, layout)
    });
    let o_lin = any_lin.then(|| {
        let q = query(g, MixerMode::Linear);
        match beta {
            Some(b) => g.delta_rule(q, k_lin, v, log_alpha, b, layout),
            None => g.decay_linear(q, k_lin, v, log_alpha, layout),
        }
    });
    let o = match (o_attn, o_lin) {
        (Some(a), Some(l)) => g.select_rows(a, l, attn_rows),
        (Some(a), None) => a,
        (None, Some(l)) => l,
        (None, None) => unreachable!("at least one row"),
    };

    let g_pre = g.matmul(x, p.w_g);
    let gate = |g: &mut Graph<F>, t: Var| {
        if variant.use_gate {
            let s = g.silu(g_pre);
            g.mul(t, s)
        } else {
            t
        }
    };
    let mixed = match variant.norm_kind {
        NormKind::Rms => {
            let t = gate(g, o);
            g.rms_norm(t, p.norm_scale, NORM_EPS)
        }
        NormKind::Group => {
            let t = g.group_norm(o, p.norm_scale, dims.d_head, NORM_EPS);
            gate(g, t)
        }
    };
    let y = g.matmul(mixed, p.w_o);
    BlockTrace { y, k_pre, v_pre, v, k_attn, k_lin, log_alpha, beta }
}

fn attn_row_mask(schedule: &ModeSchedule) -> Vec<bool> {
    schedule.per_position().into_iter().map(|m| m == MixerMode::Attention).collect()
}

/// Block output for one sequence under a chunk schedule.
pub fn block_forward_train<F: Real>(
    x: &Tensor<F>,
    schedule: &ModeSchedule,
    params: &OryxBlockParams<Tensor<F>>,
    variant: &BlockVariant,
    dims: &BlockDims,
) -> Result<Tensor<F>> {
    schedule.check_covers(x.rows())?;
    if x.rows() == 0 {
        return Ok(Tensor::zeros(&[0, dims.d_model]));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = params.map("", &mut |_, t| g.constant(t.clone()));
    let trace = block_forward_graph(&mut g, xv, &attn_row_mask(schedule), x.rows(), &pv, variant, dims);
    let y = g.value(trace.y).clone();
    y.check_finite("block output")?;
    Ok(y)
}

/// Joint attention/linear decode state of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct DualLayerState<F> {
    pub kv: Vec<KvCache<F>>,
    pub rec: Vec<RecurrentState<F>>,
    /// Most recent `conv_width - 1` pre-convolution key rows, oldest first.
    pub k_tail: Vec<Vec<F>>,
    pub v_tail: Vec<Vec<F>>,
    pub position: usize,
}

impl<F: Real> DualLayerState<F> {
    pub fn new(dims: &BlockDims) -> Self {
        let h = dims.heads();
        Self {
            kv: (0..h).map(|_| KvCache::new(dims.d_head, dims.d_head)).collect(),
            rec: (0..h).map(|_| RecurrentState::zeros(dims.d_head, dims.d_head)).collect(),
            k_tail: Vec::new(),
            v_tail: Vec::new(),
            position: 0,
        }
    }

    pub fn kv_bytes(&self) -> usize {
        self.kv.iter().map(|c| c.bytes()).sum()
    }

    pub fn recurrent_bytes(&self) -> usize {
        self.rec.iter().map(|r| r.s.len()).sum::<usize>() * F::PRECISION.byte_width()
    }

    pub(crate) fn push_tail(&mut self, k_pre: &[F], v_pre: &[F], width: usize) {
        let keep = width.saturating_sub(1);
        for (tail, row) in [(&mut self.k_tail, k_pre), (&mut self.v_tail, v_pre)] {
            if keep == 0 {
                continue;
            }
            tail.push(row.to_vec());
            if tail.len() > keep {
                tail.remove(0);
            }
        }
    }
}

fn vec_mat<F: Real>(x: &[F], w: &Tensor<F>) -> Result<Tensor<F>> {
    Tensor::from_vec(&[1, x.len()], x.to_vec())?.matmul(w)
}

fn conv_step<F: Real>(cur: &[F], tail: &[Vec<F>], c: &ConvParams<Tensor<F>>) -> Vec<F> {
    let mut out = c.b.data().to_vec();
    for j in 0..c.w.rows() {
        let src = if j == 0 {
            cur
        } else if j <= tail.len() {
            &tail[tail.len() - j]
        } else {
            break;
        };
        for ((o, &w), &x) in out.iter_mut().zip(c.w.row(j)).zip(src) {
            *o += w * x;
        }
    }
    out
}

/// One decode step: updates the KV cache and the recurrent state, then
/// reads out through the selected mixer.
pub fn block_decode_step<F: Real>(
    x_t: &[F],
    mode: MixerMode,
    state: &mut DualLayerState<F>,
    params: &OryxBlockParams<Tensor<F>>,
    variant: &BlockVariant,
    dims: &BlockDims,
) -> Result<Vec<F>> {
    if x_t.len() != dims.d_model {
        return Err(shape_err("block_decode_step", format!("input width {} vs {}", x_t.len(), dims.d_model)));
    }
    let dh = dims.d_head;
    let pos = state.position;
    let x = Tensor::from_vec(&[1, dims.d_model], x_t.to_vec())?;
    let k_pre = vec_mat(x_t, &params.w_k)?;
    let v_pre = vec_mat(x_t, &params.w_v)?;
    let (k, v) = if variant.use_conv {
        let (ck, cv) = conv_pair(params)?;
        let k = conv_step(k_pre.data(), &state.k_tail, ck);
        let v = conv_step(v_pre.data(), &state.v_tail, cv);
        (Tensor::from_vec(&[1, dims.d_model], k)?, Tensor::from_vec(&[1, dims.d_model], v)?)
    } else {
        (k_pre.clone(), v_pre.clone())
    };
    let k = activate(k, variant.conv_activation);
    let v = activate(v, variant.conv_activation);
    state.push_tail(k_pre.data(), v_pre.data(), dims.conv_width);

    let q = compute_query(&x, params, variant, mode)?;
    let (_, k_attn) = apply_positional_and_norm_policy(&q, &k, variant, MixerMode::Attention, dims, pos)?;
    let (_, k_lin) = apply_positional_and_norm_policy(&q, &k, variant, MixerMode::Linear, dims, pos)?;
    let (q_view, _) = apply_positional_and_norm_policy(&q, &k, variant, mode, dims, pos)?;
    let (la, beta) = support_gates(&x, params)?;

    let mut o = vec![F::zero(); dims.d_model];
    for h in 0..dims.heads() {
        let cols = h * dh..(h + 1) * dh;
        let vh = &v.data()[cols.clone()];
        let ka = &k_attn.data()[cols.clone()];
        let kl = &k_lin.data()[cols.clone()];
        let qh = &q_view.data()[cols.clone()];
        let alpha = la.data()[h].exp();
        let b = beta.as_ref().map(|b| b.data()[h]);
        state.rec[h].write(kl, vh, alpha, b);
        let out = match mode {
            MixerMode::Attention => attention_decode_step(&mut state.kv[h], qh, ka, vh),
            MixerMode::Linear => {
                state.kv[h].push(ka, vh);
                state.rec[h].read(qh)
            }
        };
        o[cols].copy_from_slice(&out);
    }
    state.position += 1;
    let o = Tensor::from_vec(&[1, dims.d_model], o)?;
    let g_pre = x.matmul(&params.w_g)?;
    let y = gated_output(&o, &g_pre, params, variant, dims)?;
    y.check_finite("block decode output")?;
    Ok(y.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::{attention_parallel, gdn_parallel, mamba2_parallel};
    use crate::schedule::sample_mode_schedule;

    fn dims() -> BlockDims {
        BlockDims { d_model: 8, d_head: 4, conv_width: 3, rope_base: 10000.0 }
    }

    fn setup(variant: &BlockVariant, seed: u64) -> (OryxBlockParams<Tensor<f64>>, Tensor<f64>) {
        let mut rng = SeededRng::new(seed);
        let mut p = init_block_params::<f64>(&dims(), variant, 1.0, &mut rng);
        // larger weights than the default init so every path matters numerically
        p.visit_mut("", &mut |name, t| {
            if t.shape().len() == 2 && !name.starts_with("conv") {
                *t = t.scale(15.0);
            }
        });
        let x = rng.normal_tensor(&[16, 8], 1.0);
        (p, x)
    }

    /// Composition of the single-head mixer oracles and the module ops.
    fn reference_forward(
        x: &Tensor<f64>,
        mode: MixerMode,
        p: &OryxBlockParams<Tensor<f64>>,
        variant: &BlockVariant,
    ) -> Tensor<f64> {
        let d = dims();
        let (k, v) = compute_shared_kv(x, p, variant).unwrap();
        let q = compute_query(x, p, variant, mode).unwrap();
        let (q, k) = apply_positional_and_norm_policy(&q, &k, variant, mode, &d, 0).unwrap();
        let (la, beta) = support_gates(x, p).unwrap();
        let mut o = Tensor::zeros(&[x.rows(), d.d_model]);
        for h in 0..d.heads() {
            let (qh, kh, vh) = (q.cols_slice(h * 4, 4), k.cols_slice(h * 4, 4), v.cols_slice(h * 4, 4));
            let alphas: Vec<f64> = (0..x.rows()).map(|t| la.at(t, h).exp()).collect();
            let oh = match (mode, &beta) {
                (MixerMode::Attention, _) => attention_parallel(&qh, &kh, &vh).unwrap(),
                (MixerMode::Linear, None) => mamba2_parallel(&qh, &kh, &vh, &alphas).unwrap(),
                (MixerMode::Linear, Some(b)) => {
                    let betas: Vec<f64> = (0..x.rows()).map(|t| b.at(t, h)).collect();
                    gdn_parallel(&qh, &kh, &vh, &alphas, &betas).unwrap()
                }
            };
            for t in 0..x.rows() {
                o.row_mut(t)[h * 4..(h + 1) * 4].copy_from_slice(oh.row(t));
            }
        }
        let g = x.matmul(&p.w_g).unwrap();
        gated_output(&o, &g, p, variant, &d).unwrap()
    }

    #[test]
    fn degenerate_schedules_match_composed_oracle() {
        for variant in [BlockVariant::tm(), BlockVariant::tg()] {
            let (p, x) = setup(&variant, 1);
            for mode in [MixerMode::Attention, MixerMode::Linear] {
                let s = ModeSchedule::uniform(16, 4, mode);
                let y = block_forward_train(&x, &s, &p, &variant, &dims()).unwrap();
                let want = reference_forward(&x, mode, &p, &variant);
                assert!(y.max_abs_diff(&want) < 1e-10, "{variant:?} {mode:?}");
            }
        }
    }

    #[test]
    fn mixed_schedule_matches_decode_steps() {
        for variant in [BlockVariant::tm(), BlockVariant::tg()] {
            let (p, x) = setup(&variant, 2);
            use MixerMode::*;
            let s = ModeSchedule::from_chunks(16, 4, vec![Linear, Attention, Linear, Attention]).unwrap();
            let y = block_forward_train(&x, &s, &p, &variant, &dims()).unwrap();
            let mut st = DualLayerState::new(&dims());
            for t in 0..16 {
                let yt = block_decode_step(x.row(t), s.mode_at(t), &mut st, &p, &variant, &dims()).unwrap();
                let err = yt.iter().zip(y.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-10, "{variant:?} t={t} err={err}");
            }
        }
    }

    #[test]
    fn state_is_independent_of_output_modes() {
        for variant in [BlockVariant::tm(), BlockVariant::tg()] {
            let (p, x) = setup(&variant, 3);
            let mut rng = SeededRng::new(9);
            let mut reference: Option<DualLayerState<f64>> = None;
            for _ in 0..4 {
                let s = sample_mode_schedule(16, 1, 0.5, &mut rng).unwrap();
                let mut st = DualLayerState::new(&dims());
                for t in 0..16 {
                    block_decode_step(x.row(t), s.mode_at(t), &mut st, &p, &variant, &dims()).unwrap();
                }
                match &reference {
                    None => reference = Some(st),
                    Some(r) => assert_eq!(r, &st),
                }
            }
        }
    }

    #[test]
    fn output_is_causal_in_inputs_and_modes() {
        let variant = BlockVariant::tg();
        let (p, x) = setup(&variant, 4);
        use MixerMode::*;
        let s1 = ModeSchedule::from_chunks(16, 4, vec![Attention, Linear, Linear, Linear]).unwrap();
        let s2 = ModeSchedule::from_chunks(16, 4, vec![Attention, Linear, Attention, Attention]).unwrap();
        let mut x2 = x.clone();
        for t in 8..16 {
            x2.row_mut(t)[0] += 3.0;
        }
        let y1 = block_forward_train(&x, &s1, &p, &variant, &dims()).unwrap();
        let y2 = block_forward_train(&x2, &s2, &p, &variant, &dims()).unwrap();
        assert!(y1.rows_slice(0, 8).max_abs_diff(&y2.rows_slice(0, 8)) < 1e-12);
        assert!(y1.rows_slice(8, 8).max_abs_diff(&y2.rows_slice(8, 8)) > 1e-6);
    }

    #[test]
    fn toggles() {
        let mut variant = BlockVariant::tm();
        variant.use_conv = false;
        variant.shared_query = true;
        let (p, x) = setup(&variant, 5);
        assert!(p.conv_k.is_none() && p.w_q_lin.is_none());
        let (k, _) = compute_shared_kv(&x, &p, &variant).unwrap();
        assert_eq!(k, x.matmul(&p.w_k).unwrap());
        let qa = compute_query(&x, &p, &variant, MixerMode::Attention).unwrap();
        let ql = compute_query(&x, &p, &variant, MixerMode::Linear).unwrap();
        assert_eq!(qa, ql);
        assert_eq!(qa, x.matmul(&p.w_q_attn).unwrap());
    }

    #[test]
    fn delta_kernel_conv_is_identity() {
        let variant = BlockVariant::tm();
        let (mut p, x) = setup(&variant, 6);
        for c in [p.conv_k.as_mut().unwrap(), p.conv_v.as_mut().unwrap()] {
            c.w = Tensor::zeros(c.w.shape());
            for v in c.w.row_mut(0) {
                *v = 1.0;
            }
        }
        let (k, v) = compute_shared_kv(&x, &p, &variant).unwrap();
        assert!(k.max_abs_diff(&x.matmul(&p.w_k).unwrap()) < 1e-15);
        assert!(v.max_abs_diff(&x.matmul(&p.w_v).unwrap()) < 1e-15);
    }

    #[test]
    fn policy_examples() {
        let d = dims();
        let mut rng = SeededRng::new(7);
        let q: Tensor<f64> = rng.normal_tensor(&[5, 8], 1.0);
        let k: Tensor<f64> = rng.normal_tensor(&[5, 8], 1.0);
        let tm = BlockVariant::tm();
        let (q0, _) = apply_positional_and_norm_policy(&q.rows_slice(0, 1), &k.rows_slice(0, 1), &tm, MixerMode::Linear, &d, 0).unwrap();
        assert_eq!(q0, q.rows_slice(0, 1));
        let (qr, kr) = apply_positional_and_norm_policy(&q, &k, &tm, MixerMode::Attention, &d, 3).unwrap();
        for t in 0..5 {
            let n = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>();
            assert!((n(qr.row(t)) - n(q.row(t))).abs() < 1e-12);
            assert!((n(kr.row(t)) - n(k.row(t))).abs() < 1e-12);
        }
        let (ql, kl) = apply_positional_and_norm_policy(&q, &k, &BlockVariant::tg(), MixerMode::Linear, &d, 0).unwrap();
        for t in 0..5 {
            for h in 0..2 {
                for m in [&ql, &kl] {
                    let n: f64 = m.row(t)[h * 4..(h + 1) * 4].iter().map(|v| v * v).sum();
                    assert!((n.sqrt() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn closed_gate_zeroes_group_norm_output() {
        let variant = BlockVariant::tg();
        let (p, x) = setup(&variant, 8);
        let g = Tensor::zeros(&[16, 8]);
        let y = gated_output(&x, &g, &p, &variant, &dims()).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        let mut open = variant;
        open.use_gate = false;
        let y = gated_output(&x, &g, &p, &open, &dims()).unwrap();
        let want = ops::group_norm(&x, &p.norm_scale, 4, NORM_EPS).unwrap().matmul(&p.w_o).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-15);
    }
}
