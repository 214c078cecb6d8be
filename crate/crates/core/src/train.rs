//! Mixed-mode training: per-sequence chunk schedules, AdamW with a cosine
//! learning-rate schedule, and global-norm gradient clipping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::block::MixerMode;
use crate::error::{Error, Result};
use crate::model::{model_forward_graph, ModelConfig, ModelParams};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::schedule::{sample_mode_schedule, ModeSchedule};
use crate::tensor::Tensor;

pub use crate::schedule::chunk_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Chunk,
    /// One mode per sequence (a chunk spanning the whole sequence).
    Sequence,
}

fn d_warmup() -> f64 {
    0.10
}
fn d_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.1
}
fn d_clip() -> f64 {
    1.0
}
fn d_p() -> f64 {
    0.25
}
fn d_gran() -> Granularity {
    Granularity::Chunk
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    #[serde(default = "d_betas")]
    pub betas: (f64, f64),
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    pub batch_size: usize,
    #[serde(default = "d_p")]
    pub attention_prob: f64,
    #[serde(default = "d_gran")]
    pub granularity: Granularity,
}

impl TrainConfig {
    pub fn new(steps: u64, peak_lr: f64, batch_size: usize) -> Self {
        Self {
            steps,
            warmup_fraction: d_warmup(),
            peak_lr,
            min_lr: peak_lr * 0.1,
            betas: d_betas(),
            adam_eps: d_eps(),
            weight_decay: d_wd(),
            grad_clip: d_clip(),
            batch_size,
            attention_prob: d_p(),
            granularity: d_gran(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.attention_prob > 0.0 && self.attention_prob < 1.0) {
            return bad(format!("attention_prob {} must lie in (0, 1)", self.attention_prob));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} must lie in [0, 1)", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return bad(format!("learning rates peak {} / min {} are inconsistent", self.peak_lr, self.min_lr));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.steps as f64).floor() as u64
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to the minimum.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps();
    if step < warm {
        return cfg.peak_lr * step as f64 / warm as f64;
    }
    let span = cfg.steps.saturating_sub(warm);
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Adam moments in parameter visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn for_model(params: &ModelParams<Tensor<F>>) -> Self {
        let mut sizes = Vec::new();
        params.visit(&mut |_, t| sizes.push(t.len()));
        Self::new(sizes)
    }
}

/// One AdamW update over parallel slices of parameters and gradients.
/// `decay[i]` selects decoupled weight decay for slot `i`.
pub fn adamw_step<F: Real>(
    params: &mut [&mut [F]],
    grads: &[&[F]],
    decay: &[bool],
    opt: &mut OptimizerState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.m.len() || decay.len() != params.len() {
        return Err(Error::Invalid("optimizer slots do not match parameters".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].len() || opt.m[i].len() != g.len() {
            return Err(Error::Invalid(format!("optimizer slot {i} has mismatched length")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient slot {i} at optimizer step {}", opt.step + 1)));
        }
    }
    opt.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    let (fb1, fb2) = (F::of(b1), F::of(b2));
    let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let step_size = F::of(lr / c1);
    let inv_c2 = F::of(1.0 / c2);
    let eps = F::of(cfg.adam_eps);
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decay[i] { F::of(1.0 - lr * cfg.weight_decay) } else { F::one() };
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for (j, x) in p.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = fb1 * m[j] + one_b1 * g;
            v[j] = fb2 * v[j] + one_b2 * g * g;
            *x = *x * shrink - step_size * m[j] / ((v[j] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Matrices decay; vectors (norm scales, biases, decay rates) do not.
pub fn decays(t: &Tensor<impl Real>) -> bool {
    t.shape().len() >= 2
}

/// Scales gradients in place so their global L2 norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut ModelParams<Tensor<F>>, max: f64) -> f64 {
    let mut ss = 0.0f64;
    grads.visit(&mut |_, t| ss += t.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>());
    let norm = ss.sqrt();
    if norm > max {
        let s = F::of(max / norm);
        grads.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One training sequence; `targets[t]` is the token expected after
/// position `t`, or `None` when the position is not scored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    /// Next-token targets on every position of `seq[..n-1]`.
    pub fn language_model(seq: &[usize]) -> Self {
        let n = seq.len().saturating_sub(1);
        Self { tokens: seq[..n].to_vec(), targets: seq[1..].iter().map(|&t| Some(t)).collect() }
    }
}

/// Loss and gradients of a batch under given schedules.
pub fn loss_and_grads<F: Real>(
    batch: &[Example],
    schedules: &[ModeSchedule],
    params: &ModelParams<Tensor<F>>,
    config: &ModelConfig,
) -> Result<(f64, ModelParams<Tensor<F>>)> {
    let seq_len = batch.first().map(|e| e.tokens.len()).unwrap_or(0);
    if seq_len == 0 || schedules.len() != batch.len() {
        return Err(Error::Invalid("batch needs equal-length, non-empty sequences and one schedule each".into()));
    }
    let mut tokens = Vec::with_capacity(batch.len() * seq_len);
    let mut targets = Vec::with_capacity(batch.len() * seq_len);
    let mut rows = Vec::with_capacity(batch.len() * seq_len);
    for (e, s) in batch.iter().zip(schedules) {
        if e.tokens.len() != seq_len || e.targets.len() != seq_len {
            return Err(Error::ScheduleMismatch { schedule: seq_len, sequence: e.tokens.len() });
        }
        s.check_covers(seq_len)?;
        tokens.extend_from_slice(&e.tokens);
        targets.extend_from_slice(&e.targets);
        rows.extend(s.per_position().into_iter().map(|m| m == MixerMode::Attention));
    }
    let mut g = Graph::new();
    let vars = params.to_graph(&mut g);
    let trace = model_forward_graph(&mut g, &vars, config, &tokens, seq_len, &rows)?;
    let loss = g.cross_entropy(trace.logits, &targets);
    let value = g.value(loss).data()[0].as_f64();
    let mut grads = g.backward(loss);
    let mut leaves = Vec::new();
    vars.visit(&mut |_, v| leaves.push(*v));
    let mut i = 0;
    let out = params.map(&mut |_, t| {
        let gr = grads.take_or_zeros(leaves[i], t);
        i += 1;
        gr
    });
    Ok((value, out))
}

/// Central-difference check of [`loss_and_grads`] over every parameter
/// coordinate; returns the maximum relative error as defined by
/// [`crate::ops::finite_diff_grad_check`].
pub fn model_grad_check(
    batch: &[Example],
    schedules: &[ModeSchedule],
    params: &ModelParams<Tensor<f64>>,
    config: &ModelConfig,
    h: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_grads(batch, schedules, params, config)?;
    let mut flat = Vec::new();
    params.visit(&mut |_, t| flat.extend_from_slice(t.data()));
    let mut analytic = Vec::with_capacity(flat.len());
    grads.visit(&mut |_, t| analytic.extend_from_slice(t.data()));
    let loss_at = |x: &[f64]| -> Result<f64> {
        let mut off = 0;
        let p = params.map(&mut |_, t| {
            let n = t.len();
            let out = Tensor::from_vec(t.shape(), x[off..off + n].to_vec()).expect("shape preserved");
            off += n;
            out
        });
        model_loss(batch, schedules, &p, config)
    };
    crate::ops::finite_diff_grad_check(loss_at, &flat, &analytic, h)
}

/// Batch loss without building gradients.
pub fn model_loss<F: Real>(
    batch: &[Example],
    schedules: &[ModeSchedule],
    params: &ModelParams<Tensor<F>>,
    config: &ModelConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (e, s) in batch.iter().zip(schedules) {
        s.check_covers(e.tokens.len())?;
        let logits = crate::model::model_forward(&e.tokens, s, params, config)?;
        for (r, t) in e.targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = logits.row(r);
                let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
                total += lse - row[t].as_f64();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Invalid("batch has no targets".into()));
    }
    Ok(total / count as f64)
}

/// Summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub attention_fraction: f64,
}

/// Samples one schedule per sequence, takes a clipped AdamW step.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Real>(
    batch: &[Example],
    params: &mut ModelParams<Tensor<F>>,
    opt: &mut OptimizerState<F>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut SeededRng,
) -> Result<StepStats> {
    let seq_len = batch.first().map(|e| e.tokens.len()).unwrap_or(0);
    let chunk = match cfg.granularity {
        Granularity::Chunk => model_cfg.chunk,
        Granularity::Sequence => seq_len.max(1),
    };
    let schedules = batch
        .iter()
        .map(|_| sample_mode_schedule(seq_len, chunk, cfg.attention_prob, rng))
        .collect::<Result<Vec<_>>>()?;
    let total_chunks: usize = schedules.iter().map(|s| s.chunk_modes().len()).sum();
    let attn_chunks: usize = schedules.iter().map(|s| s.attention_chunks()).sum();
    let attention_fraction = attn_chunks as f64 / total_chunks.max(1) as f64;
    let lr = cosine_lr(step, cfg);
    let (loss, mut grads) = loss_and_grads(batch, &schedules, params, model_cfg)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {step} (lr {lr:.3e}, {attn_chunks}/{total_chunks} attention chunks)"
        )));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    let mut decay = Vec::new();
    params.visit(&mut |_, t| decay.push(decays(t)));
    let mut gslices: Vec<&[F]> = Vec::new();
    grads.visit(&mut |_, t| gslices.push(t.data()));
    let mut pslices: Vec<&mut [F]> = Vec::new();
    params.visit_mut(&mut |_, t| pslices.push(t.data_mut()));
    adamw_step(&mut pslices, &gslices, &decay, opt, lr, cfg).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (step {step}, lr {lr:.3e})")),
        other => other,
    })?;
    Ok(StepStats { step, lr, loss, grad_norm, attention_fraction })
}

/// Runs `cfg.steps` steps drawing batches from `next_batch`. `on_step` sees
/// every record as it is produced.
pub fn train_loop<F: Real>(
    params: &mut ModelParams<Tensor<F>>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    next_batch: &mut dyn FnMut(u64) -> Result<Vec<Example>>,
    on_step: &mut dyn FnMut(&StepStats) -> Result<()>,
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut opt = OptimizerState::for_model(params);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch = next_batch(step)?;
        let stats = train_step(&batch, params, &mut opt, model_cfg, cfg, step, rng)?;
        on_step(&stats)?;
        log.push(stats);
    }
    Ok(log)
}
