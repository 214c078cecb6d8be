//! Dual-state inference sessions, mode plans and per-position evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::block::{block_decode_step, DualLayerState, MixerMode};
use crate::error::{Error, Result};
use crate::model::{check_tokens, model_forward_graph, ModelConfig, ModelParams};
use crate::ops::{rms_norm, silu, NORM_EPS};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::train::Example;

/// Mixer choice for each absolute position `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePlan {
    modes: Vec<MixerMode>,
}

impl ModePlan {
    pub fn uniform(len: usize, mode: MixerMode) -> Self {
        Self { modes: vec![mode; len] }
    }

    pub fn from_positions(modes: Vec<MixerMode>) -> Self {
        Self { modes }
    }

    /// Starts in `initial` and flips mode at every switch point.
    pub fn from_switches(len: usize, initial: MixerMode, switches: &[usize]) -> Result<Self> {
        if switches.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!("switch points {switches:?} are not strictly increasing")));
        }
        if let Some(&last) = switches.last() {
            if last >= len {
                return Err(Error::InvalidConfig(format!("switch point {last} outside plan of length {len}")));
            }
        }
        let mut modes = Vec::with_capacity(len);
        let mut mode = initial;
        let mut next = switches.iter().peekable();
        for pos in 0..len {
            if next.peek() == Some(&&pos) {
                mode = flip(mode);
                next.next();
            }
            modes.push(mode);
        }
        Ok(Self { modes })
    }

    /// One mode per chunk of `chunk` positions; the last chunk may be ragged.
    pub fn from_chunks(len: usize, chunk: usize, chunk_modes: &[MixerMode]) -> Result<Self> {
        if chunk == 0 || chunk_modes.len() != len.div_ceil(chunk) {
            return Err(Error::ScheduleMismatch { schedule: chunk_modes.len() * chunk, sequence: len });
        }
        Ok(Self { modes: (0..len).map(|p| chunk_modes[p / chunk]).collect() })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn mode_at(&self, pos: usize) -> Option<MixerMode> {
        self.modes.get(pos).copied()
    }

    pub fn modes(&self) -> &[MixerMode] {
        &self.modes
    }

    /// Positions where the mode differs from the previous one.
    pub fn switch_points(&self) -> Vec<usize> {
        (1..self.modes.len()).filter(|&p| self.modes[p] != self.modes[p - 1]).collect()
    }

    /// The plan continued by `n` positions of `mode`.
    pub fn extended(&self, n: usize, mode: MixerMode) -> Self {
        let mut modes = self.modes.clone();
        modes.extend(std::iter::repeat_n(mode, n));
        Self { modes }
    }

    pub fn attention_rows(&self) -> Vec<bool> {
        self.modes.iter().map(|&m| m == MixerMode::Attention).collect()
    }
}

fn flip(m: MixerMode) -> MixerMode {
    match m {
        MixerMode::Attention => MixerMode::Linear,
        MixerMode::Linear => MixerMode::Attention,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Sampler {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

/// Cache sizes of a session, summed over layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub kv_bytes: usize,
    pub recurrent_bytes: usize,
}

/// Token-by-token decoder holding a [`DualLayerState`] per layer.
#[derive(Clone, Debug)]
pub struct InferenceSession<'a, F> {
    config: &'a ModelConfig,
    params: &'a ModelParams<Tensor<F>>,
    states: Vec<DualLayerState<F>>,
    tokens: Vec<usize>,
    last_logits: Option<Vec<F>>,
}

impl<'a, F: Real> InferenceSession<'a, F> {
    pub fn new(config: &'a ModelConfig, params: &'a ModelParams<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        if params.layers.len() != config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "parameters have {} layers, config {}",
                params.layers.len(),
                config.n_layers
            )));
        }
        let dims = config.dims();
        Ok(Self {
            config,
            params,
            states: (0..config.n_layers).map(|_| DualLayerState::new(&dims)).collect(),
            tokens: Vec::new(),
            last_logits: None,
        })
    }

    pub fn position(&self) -> usize {
        self.tokens.len()
    }

    /// Every token consumed so far, prompt and generated.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn states(&self) -> &[DualLayerState<F>] {
        &self.states
    }

    pub fn last_logits(&self) -> Option<&[F]> {
        self.last_logits.as_deref()
    }

    pub fn memory(&self) -> MemoryReport {
        MemoryReport {
            kv_bytes: self.states.iter().map(|s| s.kv_bytes()).sum(),
            recurrent_bytes: self.states.iter().map(|s| s.recurrent_bytes()).sum(),
        }
    }

    /// Consumes one token under `mode` and returns the next-token logits.
    pub fn step(&mut self, token: usize, mode: MixerMode) -> Result<Vec<F>> {
        let cfg = self.config;
        check_tokens(&[token], cfg.vocab_size)?;
        let dims = cfg.dims();
        let row = |x: Vec<F>| Tensor::from_vec(&[1, cfg.d_model], x);
        let mut x = self.params.embedding.row(token).to_vec();
        for (layer, state) in self.params.layers.iter().zip(&mut self.states) {
            let h = rms_norm(&row(x.clone())?, &layer.norm_mix, NORM_EPS)?;
            let y = block_decode_step(h.data(), mode, state, &layer.block, &cfg.variant, &dims)?;
            x.iter_mut().zip(&y).for_each(|(a, &b)| *a += b);
            if let (Some(norm), Some(mlp)) = (&layer.norm_mlp, &layer.mlp) {
                let h = rms_norm(&row(x.clone())?, norm, NORM_EPS)?;
                let gate = h.matmul(&mlp.w_gate)?.map(silu);
                let hidden = gate.zip_map(&h.matmul(&mlp.w_up)?, |a, b| a * b)?;
                let out = hidden.matmul(&mlp.w_down)?;
                x.iter_mut().zip(out.data()).for_each(|(a, &b)| *a += b);
            }
        }
        let xf = rms_norm(&row(x)?, &self.params.final_norm, NORM_EPS)?;
        let logits = xf.matmul(&self.params.head)?;
        logits.check_finite("decode logits")?;
        let logits = logits.into_data();
        self.tokens.push(token);
        self.last_logits = Some(logits.clone());
        Ok(logits)
    }

    /// Consumes `tokens`; position `p` of the session runs in `plan[p]`.
    /// Returns the logits after each token, `[tokens.len() x vocab]`.
    pub fn prefill(&mut self, tokens: &[usize], plan: &ModePlan) -> Result<Tensor<F>> {
        let needed = self.position() + tokens.len();
        if plan.len() < needed {
            return Err(Error::PlanTooShort { plan: plan.len(), needed });
        }
        check_tokens(tokens, self.config.vocab_size)?;
        let vocab = self.config.vocab_size;
        let mut out = Vec::with_capacity(tokens.len() * vocab);
        for &t in tokens {
            let mode = plan.modes[self.position()];
            out.extend(self.step(t, mode)?);
        }
        Tensor::from_vec(&[tokens.len(), vocab], out)
    }

    /// Emits `n` tokens decoded under `mode`. The first comes from the
    /// logits of the last consumed token; each emitted token is consumed.
    pub fn generate(&mut self, n: usize, mode: MixerMode, sampler: Sampler) -> Result<Vec<usize>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = match sampler {
            Sampler::Greedy => None,
            Sampler::Temperature { tau, seed } => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
                }
                Some((tau, SeededRng::new(seed)))
            }
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let logits = self
                .last_logits
                .as_ref()
                .ok_or_else(|| Error::Invalid("generate needs a prefilled session".into()))?;
            let tok = match &mut rng {
                None => argmax(logits),
                Some((tau, rng)) => sample(logits, *tau, rng),
            };
            out.push(tok);
            self.step(tok, mode)?;
        }
        Ok(out)
    }
}

fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample<F: Real>(logits: &[F], tau: f64, rng: &mut SeededRng) -> usize {
    let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|x| ((x.as_f64() - max) / tau).exp()).collect();
    let mut u = rng.uniform() * w.iter().sum::<f64>();
    for (i, &p) in w.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    w.len() - 1
}

/// Logits of a whole sequence in one batched pass; position `p` uses
/// `plan[p]`. Agrees with [`InferenceSession::prefill`] from a fresh session.
pub fn forward_with_plan<F: Real>(
    tokens: &[usize],
    plan: &ModePlan,
    params: &ModelParams<Tensor<F>>,
    config: &ModelConfig,
) -> Result<Tensor<F>> {
    if plan.len() < tokens.len() {
        return Err(Error::PlanTooShort { plan: plan.len(), needed: tokens.len() });
    }
    if tokens.is_empty() {
        return Ok(Tensor::zeros(&[0, config.vocab_size]));
    }
    let mut g = Graph::new();
    let p = params.map(&mut |_, t| g.constant(t.clone()));
    let rows = &plan.attention_rows()[..tokens.len()];
    let trace = model_forward_graph(&mut g, &p, config, tokens, tokens.len(), rows)?;
    let logits = g.value(trace.logits).clone();
    logits.check_finite("logits")?;
    Ok(logits)
}

/// Mean next-token NLL per position over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllCurve {
    /// `None` where no sequence has a target.
    pub raw: Vec<Option<f64>>,
    pub smoothed: Vec<Option<f64>>,
    pub window: usize,
}

pub const DEFAULT_SMOOTHING: usize = 64;

/// Centered moving average over the defined entries of a window of
/// `window` positions, truncated at the ends.
pub fn smooth(raw: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let w = window.max(1);
    let (before, after) = ((w - 1) / 2, w / 2);
    (0..raw.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(raw.len());
            let vals: Vec<f64> = raw[lo..hi].iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

pub fn nll_by_position<F: Real>(
    params: &ModelParams<Tensor<F>>,
    config: &ModelConfig,
    eval_set: &[Example],
    plan: &ModePlan,
    window: usize,
) -> Result<NllCurve> {
    let first = eval_set.first().ok_or(Error::EmptyEvalSet)?;
    let len = first.tokens.len();
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for ex in eval_set {
        if ex.tokens.len() != len || ex.targets.len() != len {
            return Err(Error::ScheduleMismatch { schedule: len, sequence: ex.tokens.len() });
        }
        let logits = forward_with_plan(&ex.tokens, plan, params, config)?;
        for (t, target) in ex.targets.iter().enumerate() {
            if let Some(y) = *target {
                check_tokens(&[y], config.vocab_size)?;
                sum[t] += token_nll(logits.row(t), y);
                count[t] += 1;
            }
        }
    }
    let raw: Vec<Option<f64>> = sum.iter().zip(&count).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect();
    let smoothed = smooth(&raw, window);
    Ok(NllCurve { raw, smoothed, window })
}

fn token_nll<F: Real>(row: &[F], target: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    lse - row[target].as_f64()
}

/// A retrieval probe: the answer must follow context + query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub context: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Where the context ends and the prompt begins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Split {
    /// Use the task's own context/query boundary.
    Task,
    /// The first `fraction` of context + query tokens form the context.
    Fraction(f64),
}

pub const DEFAULT_SPLIT_FRACTION: f64 = 0.975;

/// Exact-match accuracy with the context prefilled under `context_mode`
/// and the remaining prompt plus greedy generation under `prompt_mode`.
pub fn cross_mode_retrieval_eval<F: Real>(
    params: &ModelParams<Tensor<F>>,
    config: &ModelConfig,
    tasks: &[RetrievalTask],
    context_mode: MixerMode,
    prompt_mode: MixerMode,
    split: Split,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut correct = 0usize;
    for task in tasks {
        let prompt: Vec<usize> = task.context.iter().chain(&task.query).copied().collect();
        if prompt.is_empty() {
            return Err(Error::Invalid("retrieval task has no prompt tokens".into()));
        }
        let cut = match split {
            Split::Task => task.context.len(),
            Split::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::InvalidConfig(format!("split fraction {f} outside [0, 1]")));
                }
                (f * prompt.len() as f64).floor() as usize
            }
        };
        // the final prompt token always runs in the prompt mode
        let cut = cut.min(prompt.len() - 1);
        let mut plan = ModePlan::uniform(cut, context_mode).extended(prompt.len() - cut, prompt_mode);
        plan = plan.extended(task.answer.len(), prompt_mode);
        let mut session = InferenceSession::new(config, params)?;
        session.prefill(&prompt, &plan)?;
        let out = session.generate(task.answer.len(), prompt_mode, Sampler::Greedy)?;
        correct += usize::from(out == task.answer);
    }
    Ok(correct as f64 / tasks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::MixerPair;
    use crate::model::{init_params, model_forward};
    use crate::schedule::ModeSchedule;

    fn tiny(pair: MixerPair, layers: usize, mlp: bool) -> ModelConfig {
        let mut c = ModelConfig::small(pair);
        c.vocab_size = 11;
        c.d_model = 16;
        c.d_head = 4;
        c.n_layers = layers;
        c.chunk = 4;
        c.use_mlp = mlp;
        c
    }

    fn tokens(n: usize, seed: u64) -> Vec<usize> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| rng.below(11)).collect()
    }

    #[test]
    fn plan_constructors() {
        let p = ModePlan::from_switches(6, MixerMode::Attention, &[2, 5]).unwrap();
        use MixerMode::{Attention as A, Linear as L};
        assert_eq!(p.modes(), &[A, A, L, L, L, A]);
        assert_eq!(p.switch_points(), vec![2, 5]);
        assert!(ModePlan::from_switches(6, A, &[3, 3]).is_err());
        assert!(ModePlan::from_switches(6, A, &[6]).is_err());
        let c = ModePlan::from_chunks(5, 2, &[L, A, L]).unwrap();
        assert_eq!(c.modes(), &[L, L, A, A, L]);
        assert!(ModePlan::from_chunks(5, 2, &[L, A]).is_err());
        assert_eq!(c.extended(2, A).modes(), &[L, L, A, A, L, A, A]);
    }

    #[test]
    fn step_path_matches_batched_forward() {
        for pair in [MixerPair::Tm, MixerPair::Tg] {
            let cfg = tiny(pair, 2, true);
            let params = init_params::<f64>(&cfg, &mut SeededRng::new(3)).unwrap();
            let toks = tokens(13, 5);
            let all_a = ModeSchedule::uniform(13, cfg.chunk, MixerMode::Attention);
            let mut s = InferenceSession::new(&cfg, &params).unwrap();
            let step = s.prefill(&toks, &ModePlan::uniform(13, MixerMode::Attention)).unwrap();
            let train = model_forward(&toks, &all_a, &params, &cfg).unwrap();
            assert!(step.max_abs_diff(&train) < 1e-10);

            // switch points off the chunk grid
            let plan = ModePlan::from_switches(13, MixerMode::Linear, &[3, 7, 8]).unwrap();
            let mut s = InferenceSession::new(&cfg, &params).unwrap();
            let step = s.prefill(&toks, &plan).unwrap();
            let batched = forward_with_plan(&toks, &plan, &params, &cfg).unwrap();
            assert!(step.max_abs_diff(&batched) < 1e-10, "{pair:?}");
        }
    }

    #[test]
    fn prefill_in_pieces_equals_one_prefill() {
        let cfg = tiny(MixerPair::Tg, 2, true);
        let params = init_params::<f64>(&cfg, &mut SeededRng::new(4)).unwrap();
        let toks = tokens(10, 6);
        let plan = ModePlan::from_switches(10, MixerMode::Attention, &[5]).unwrap();
        let mut whole = InferenceSession::new(&cfg, &params).unwrap();
        let a = whole.prefill(&toks, &plan).unwrap();
        let mut parts = InferenceSession::new(&cfg, &params).unwrap();
        let b1 = parts.prefill(&toks[..4], &plan).unwrap();
        let b2 = parts.prefill(&toks[4..], &plan).unwrap();
        assert_eq!(a.rows_slice(0, 4), b1);
        assert_eq!(a.rows_slice(4, 6), b2);
        assert_eq!(whole.states(), parts.states());
    }

    #[test]
    fn short_plan_and_empty_prefill() {
        let cfg = tiny(MixerPair::Tm, 1, false);
        let params = init_params::<f64>(&cfg, &mut SeededRng::new(1)).unwrap();
        let mut s = InferenceSession::new(&cfg, &params).unwrap();
        let before = s.clone();
        let out = s.prefill(&[], &ModePlan::uniform(0, MixerMode::Linear)).unwrap();
        assert_eq!(out.rows(), 0);
        assert_eq!(s.states(), before.states());
        assert!(matches!(
            s.prefill(&[1, 2, 3], &ModePlan::uniform(2, MixerMode::Linear)),
            Err(Error::PlanTooShort { plan: 2, needed: 3 })
        ));
    }

    #[test]
    fn single_block_states_ignore_plan() {
        for pair in [MixerPair::Tm, MixerPair::Tg] {
            let cfg = tiny(pair, 1, false);
            let params = init_params::<f64>(&cfg, &mut SeededRng::new(8)).unwrap();
            let toks = tokens(12, 2);
            let plans = [
                ModePlan::uniform(12, MixerMode::Attention),
                ModePlan::uniform(11, MixerMode::Linear).extended(1, MixerMode::Attention),
                ModePlan::from_switches(12, MixerMode::Linear, &[2, 5, 6]).unwrap(),
            ];
            let mut firsts = Vec::new();
            let mut states = Vec::new();
            for plan in &plans {
                let mut s = InferenceSession::new(&cfg, &params).unwrap();
                s.prefill(&toks, plan).unwrap();
                states.push(s.states().to_vec());
                firsts.push(s.generate(1, MixerMode::Attention, Sampler::Greedy).unwrap());
            }
            assert!(states.windows(2).all(|w| w[0] == w[1]));
            assert!(firsts.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny(MixerPair::Tm, 2, true);
        let params = init_params::<f64>(&cfg, &mut SeededRng::new(2)).unwrap();
        let mut s = InferenceSession::new(&cfg, &params).unwrap();
        s.prefill(&[1, 2, 3], &ModePlan::uniform(3, MixerMode::Linear)).unwrap();
        let t = s.clone();
        let mut s2 = s.clone();
        assert_eq!(s.generate(0, MixerMode::Linear, Sampler::Greedy).unwrap(), Vec::<usize>::new());
        let a = s.generate(5, MixerMode::Linear, Sampler::Greedy).unwrap();
        assert_eq!(a, s2.generate(5, MixerMode::Linear, Sampler::Greedy).unwrap());
        assert_eq!(s.position(), 8);
        let hot = Sampler::Temperature { tau: 2.0, seed: 9 };
        let (mut u, mut v) = (t.clone(), t);
        assert_eq!(u.generate(6, MixerMode::Attention, hot).unwrap(), v.generate(6, MixerMode::Attention, hot).unwrap());
        let fresh = InferenceSession::new(&cfg, &params).unwrap().generate(1, MixerMode::Linear, Sampler::Greedy);
        assert!(fresh.is_err());
    }

    #[test]
    fn memory_accounting() {
        let cfg = tiny(MixerPair::Tm, 2, false);
        let params = init_params::<f32>(&cfg, &mut SeededRng::new(2)).unwrap();
        let mut s = InferenceSession::new(&cfg, &params).unwrap();
        let mut prev = s.memory();
        assert_eq!(prev.kv_bytes, 0);
        for t in 0..8 {
            s.step(t % 11, MixerMode::Linear).unwrap();
            let m = s.memory();
            assert_eq!(m.kv_bytes - prev.kv_bytes, 2 * 2 * 16 * 4);
            assert_eq!(m.recurrent_bytes, prev.recurrent_bytes);
            if t + 1 >= cfg.d_head {
                assert!(m.kv_bytes >= m.recurrent_bytes);
            }
            prev = m;
        }
    }

    #[test]
    fn smoothing_and_curves() {
        let raw = vec![Some(1.0), None, Some(3.0), Some(5.0)];
        assert_eq!(smooth(&raw, 1), raw);
        assert_eq!(smooth(&raw, 3), vec![Some(1.0), Some(2.0), Some(4.0), Some(4.0)]);

        let cfg = tiny(MixerPair::Tm, 1, true);
        let params = init_params::<f64>(&cfg, &mut SeededRng::new(5)).unwrap();
        let ex = Example::language_model(&tokens(9, 1));
        let plan = ModePlan::uniform(8, MixerMode::Attention);
        let curve = nll_by_position(&params, &cfg, std::slice::from_ref(&ex), &plan, 1).unwrap();
        let logits = forward_with_plan(&ex.tokens, &plan, &params, &cfg).unwrap();
        assert_eq!(curve.raw.len(), 8);
        for (t, v) in curve.raw.iter().enumerate() {
            let expect = token_nll(logits.row(t), ex.targets[t].unwrap());
            assert!((v.unwrap() - expect).abs() < 1e-12 && expect >= 0.0);
        }
        assert_eq!(curve.raw, curve.smoothed);
        assert!(matches!(nll_by_position(&params, &cfg, &[], &plan, 4), Err(Error::EmptyEvalSet)));
    }

    #[test]
    fn retrieval_eval_with_matching_modes() {
        let cfg = tiny(MixerPair::Tm, 1, true);
        let params = init_params::<f64>(&cfg, &mut SeededRng::new(5)).unwrap();
        let mut probe = InferenceSession::new(&cfg, &params).unwrap();
        probe.prefill(&[3, 4, 5], &ModePlan::uniform(3, MixerMode::Linear)).unwrap();
        let guess = probe.generate(2, MixerMode::Linear, Sampler::Greedy).unwrap();
        let hit = RetrievalTask { context: vec![3, 4], query: vec![5], answer: guess.clone() };
        let miss = RetrievalTask { answer: vec![(guess[0] + 1) % 11, guess[1]], ..hit.clone() };
        let acc = cross_mode_retrieval_eval(&params, &cfg, &[hit.clone(), miss], MixerMode::Linear, MixerMode::Linear, Split::Task)
            .unwrap();
        assert_eq!(acc, 0.5);
        let frac = cross_mode_retrieval_eval(&params, &cfg, &[hit], MixerMode::Linear, MixerMode::Linear, Split::Fraction(0.975));
        assert_eq!(frac.unwrap(), 1.0);
    }
}
