//! Single-head sequence mixers in parallel, chunked and recurrent form.
//!
//! Row-vector convention throughout: `q_t`, `k_t` are `1 x d_k`, `v_t` is
//! `1 x d_v`, the recurrent state `S` is `d_k x d_v` and the readout is
//! `o_t = q_t S_t`.
//!
//! Every matrix product issued by this module is tallied by a thread-local
//! FLOP counter (`2 m n k` per product, `2 n` per dot product of length
//! `n`) so the analytic cost model can be checked against real code paths.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset_flop_counter() {
    FLOPS.with(|c| c.set(0));
}

pub fn flop_count() -> u64 {
    FLOPS.with(|c| c.get())
}

fn count(n: u64) {
    FLOPS.with(|c| c.set(c.get() + n));
}

fn mm<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    count(2 * (a.rows() * a.cols() * b.cols()) as u64);
    a.matmul(b).expect("mixer operand shapes are validated by callers")
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Which linear recurrence backs the linear mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearRule {
    Mamba2,
    Gdn,
}

/// Per-timestep gate values of one head: decay `alpha` and, for the gated
/// delta rule, the write strength `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates<F> {
    pub alphas: Vec<F>,
    pub betas: Option<Vec<F>>,
}

impl<F: Real> Gates<F> {
    pub fn decay(alphas: Vec<F>) -> Self {
        Self { alphas, betas: None }
    }

    pub fn delta(alphas: Vec<F>, betas: Vec<F>) -> Self {
        Self { alphas, betas: Some(betas) }
    }

    fn beta(&self, t: usize) -> F {
        self.betas.as_ref().map_or(F::one(), |b| b[t])
    }
}

/// Lower-triangular cumulative decay products,
/// `gamma[i][j] = alpha[j+1] * ... * alpha[i]` for `i >= j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMask<F> {
    gamma: Tensor<F>,
}

impl<F: Real> DecayMask<F> {
    pub fn matrix(&self) -> &Tensor<F> {
        &self.gamma
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.gamma.at(i, j)
    }

    pub fn len(&self) -> usize {
        self.gamma.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.rows() == 0
    }
}

pub fn build_decay_mask<F: Real>(alphas: &[F]) -> DecayMask<F> {
    let t = alphas.len();
    let mut gamma = Tensor::zeros(&[t, t]);
    for i in 0..t {
        gamma.set(i, i, F::one());
        for j in (0..i).rev() {
            let v = gamma.at(i, j + 1) * alphas[j + 1];
            gamma.set(i, j, v);
        }
    }
    DecayMask { gamma }
}

/// Per-head fixed-size memory `S` (`d_k x d_v`).
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F> {
    pub s: Tensor<F>,
}

impl<F: Real> RecurrentState<F> {
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self { s: Tensor::zeros(&[d_k, d_v]) }
    }

    pub fn d_k(&self) -> usize {
        self.s.rows()
    }

    pub fn d_v(&self) -> usize {
        self.s.cols()
    }

    /// One state transition without a readout: the decayed outer-product
    /// write when `beta` is `None`, the gated delta rule otherwise.
    pub fn write(&mut self, k: &[F], v: &[F], alpha: F, beta: Option<F>) {
        let (dk, dv) = (self.d_k(), self.d_v());
        match beta {
            None => {
                for (i, &ki) in k.iter().enumerate() {
                    for (s, &vj) in self.s.row_mut(i).iter_mut().zip(v) {
                        *s = alpha * *s + ki * vj;
                    }
                }
                count(2 * (dk * dv) as u64);
            }
            Some(beta) => {
                let mut ks = vec![F::zero(); dv];
                for (i, &ki) in k.iter().enumerate() {
                    for (a, &s) in ks.iter_mut().zip(self.s.row(i)) {
                        *a += ki * s;
                    }
                }
                for (i, &ki) in k.iter().enumerate() {
                    for ((s, &kij), &vj) in self.s.row_mut(i).iter_mut().zip(&ks).zip(v) {
                        *s = alpha * (*s - beta * ki * kij) + beta * ki * vj;
                    }
                }
                count(4 * (dk * dv) as u64);
            }
        }
    }

    /// `o = q S`.
    pub fn read(&self, q: &[F]) -> Vec<F> {
        let dv = self.d_v();
        count(2 * (q.len() * dv) as u64);
        let mut o = vec![F::zero(); dv];
        for (i, &qi) in q.iter().enumerate() {
            for (o, &s) in o.iter_mut().zip(self.s.row(i)) {
                *o += qi * s;
            }
        }
        o
    }
}

/// Append-only per-head key/value store.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<F> {
    d_k: usize,
    d_v: usize,
    keys: Vec<F>,
    values: Vec<F>,
}

impl<F: Real> KvCache<F> {
    pub fn new(d_k: usize, d_v: usize) -> Self {
        Self { d_k, d_v, keys: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        if self.d_k == 0 {
            0
        } else {
            self.keys.len() / self.d_k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, i: usize) -> &[F] {
        &self.keys[i * self.d_k..(i + 1) * self.d_k]
    }

    pub fn value(&self, i: usize) -> &[F] {
        &self.values[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn push(&mut self, k: &[F], v: &[F]) {
        assert_eq!(k.len(), self.d_k, "key width");
        assert_eq!(v.len(), self.d_v, "value width");
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }

    pub fn bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * F::PRECISION.byte_width()
    }
}

fn check_qkv<F: Real>(op: &'static str, q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> Result<()> {
    if q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols() {
        return Err(shape_err(
            op,
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok(())
}

fn check_gates<F: Real>(op: &'static str, t: usize, gates: &Gates<F>, rule: LinearRule) -> Result<()> {
    if gates.alphas.len() != t {
        return Err(shape_err(op, format!("{} decays for {t} positions", gates.alphas.len())));
    }
    match (rule, &gates.betas) {
        (LinearRule::Gdn, None) => Err(shape_err(op, "delta rule needs write strengths")),
        (LinearRule::Gdn, Some(b)) if b.len() != t => {
            Err(shape_err(op, format!("{} write strengths for {t} positions", b.len())))
        }
        _ => Ok(()),
    }
}

/// Softmax attention over the causal prefix for one position.
fn attend<'a, F: Real>(
    q: &[F],
    keys: impl Fn(usize) -> &'a [F],
    values: impl Fn(usize) -> &'a [F],
    n: usize,
    d_v: usize,
) -> Vec<F> {
    let scale = F::one() / F::of(q.len() as f64).sqrt();
    let mut scores = Vec::with_capacity(n);
    for s in 0..n {
        scores.push(dot(q, keys(s)) * scale);
    }
    let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in scores.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let mut o = vec![F::zero(); d_v];
    for (s, &w) in scores.iter().enumerate() {
        let w = w / sum;
        for (o, &vv) in o.iter_mut().zip(values(s)) {
            *o += w * vv;
        }
    }
    count(2 * (n * (q.len() + d_v)) as u64);
    o
}

/// Causal softmax attention with `1/sqrt(d_k)` score scaling.
pub fn attention_parallel<F: Real>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
    check_qkv("attention_parallel", q, k, v)?;
    let (t, dv) = (q.rows(), v.cols());
    let mut out = Tensor::zeros(&[t, dv]);
    for i in 0..t {
        let o = attend(q.row(i), |s| k.row(s), |s| v.row(s), i + 1, dv);
        out.row_mut(i).copy_from_slice(&o);
    }
    Ok(out)
}

/// Appends `(k_t, v_t)` to the cache and attends over it with `q_t`.
pub fn attention_decode_step<F: Real>(cache: &mut KvCache<F>, q: &[F], k: &[F], v: &[F]) -> Vec<F> {
    cache.push(k, v);
    let cache = &*cache;
    let n = cache.len();
    let dv = cache.d_v;
    attend(q, |s| cache.key(s), |s| cache.value(s), n, dv)
}

/// `(Gamma o (Q K^T)) V`.
pub fn mamba2_parallel<F: Real>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, alphas: &[F]) -> Result<Tensor<F>> {
    check_qkv("mamba2_parallel", q, k, v)?;
    check_gates("mamba2_parallel", q.rows(), &Gates::decay(alphas.to_vec()), LinearRule::Mamba2)?;
    let gamma = build_decay_mask(alphas);
    let (t, dv) = (q.rows(), v.cols());
    let mut out = Tensor::zeros(&[t, dv]);
    for i in 0..t {
        let o = out.row_mut(i);
        for s in 0..=i {
            let w = gamma.at(i, s) * dot(q.row(i), k.row(s));
            for (o, &vv) in o.iter_mut().zip(v.row(s)) {
                *o += w * vv;
            }
        }
        count(2 * ((i + 1) * (q.cols() + dv)) as u64);
    }
    Ok(out)
}

/// `S' = alpha S + k^T v`, `o = q S'`.
pub fn mamba2_recurrent_step<F: Real>(state: &mut RecurrentState<F>, q: &[F], k: &[F], v: &[F], alpha: F) -> Vec<F> {
    state.write(k, v, alpha, None);
    state.read(q)
}

/// `S' = alpha (I - beta k^T k) S + beta k^T v`, `o = q S'`.
pub fn gdn_recurrent_step<F: Real>(
    state: &mut RecurrentState<F>,
    q: &[F],
    k: &[F],
    v: &[F],
    alpha: F,
    beta: F,
) -> Vec<F> {
    state.write(k, v, alpha, Some(beta));
    state.read(q)
}

/// Parallel gated delta rule:
/// `(Gamma o QK^T) [I + strictLower(diag(beta)(Gamma o KK^T))]^{-1} diag(beta) V`,
/// solved by forward substitution.
pub fn gdn_parallel<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    alphas: &[F],
    betas: &[F],
) -> Result<Tensor<F>> {
    check_qkv("gdn_parallel", q, k, v)?;
    let gates = Gates::delta(alphas.to_vec(), betas.to_vec());
    check_gates("gdn_parallel", q.rows(), &gates, LinearRule::Gdn)?;
    let gamma = build_decay_mask(alphas);
    let (t, dv) = (q.rows(), v.cols());
    // unit lower-triangular system L U = diag(beta) V
    let mut u = Tensor::zeros(&[t, dv]);
    for i in 0..t {
        let mut row: Vec<F> = v.row(i).iter().map(|&x| betas[i] * x).collect();
        for s in 0..i {
            let l = betas[i] * gamma.at(i, s) * dot(k.row(i), k.row(s));
            for (r, &us) in row.iter_mut().zip(u.row(s)) {
                *r -= l * us;
            }
        }
        // diagonal is exactly one
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularSolve(i));
        }
        u.row_mut(i).copy_from_slice(&row);
    }
    let mut out = Tensor::zeros(&[t, dv]);
    for i in 0..t {
        let o = out.row_mut(i);
        for s in 0..=i {
            let w = gamma.at(i, s) * dot(q.row(i), k.row(s));
            for (o, &us) in o.iter_mut().zip(u.row(s)) {
                *o += w * us;
            }
        }
    }
    Ok(out)
}

/// Rolls a recurrence step-by-step over a whole sequence.
pub fn recurrent_rollout<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    gates: &Gates<F>,
    rule: LinearRule,
    state: &mut RecurrentState<F>,
) -> Result<Tensor<F>> {
    check_qkv("recurrent_rollout", q, k, v)?;
    check_gates("recurrent_rollout", q.rows(), gates, rule)?;
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    for t in 0..q.rows() {
        let o = match rule {
            LinearRule::Mamba2 => mamba2_recurrent_step(state, q.row(t), k.row(t), v.row(t), gates.alphas[t]),
            LinearRule::Gdn => {
                gdn_recurrent_step(state, q.row(t), k.row(t), v.row(t), gates.alphas[t], gates.beta(t))
            }
        };
        out.row_mut(t).copy_from_slice(&o);
    }
    Ok(out)
}

/// Work products of one chunk that do not depend on the incoming state.
struct ChunkPlan<F> {
    start: usize,
    len: usize,
    /// within-chunk cumulative decay, `gamma_in[t] = alpha[start] ... alpha[start+t]`
    gamma_in: Vec<F>,
    /// `Gamma o (Q K^T)` restricted to the chunk (lower triangle incl. diagonal)
    scores: Option<Tensor<F>>,
    /// transformed values `U` (`V` itself for Mamba-2)
    u: Tensor<F>,
    /// state-correction rows `W` (delta rule only)
    w: Option<Tensor<F>>,
    /// `Ktilde^T U`: the chunk's own contribution to the state
    chunk_state: Tensor<F>,
    /// `Ktilde` rows, kept for the delta-rule transition
    k_tilde: Tensor<F>,
}

fn plan_chunk<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    gates: &Gates<F>,
    rule: LinearRule,
    start: usize,
    len: usize,
    with_output: bool,
) -> ChunkPlan<F> {
    let qc = q.rows_slice(start, len);
    let kc = k.rows_slice(start, len);
    let vc = v.rows_slice(start, len);
    let alphas = &gates.alphas[start..start + len];
    let gamma = build_decay_mask(alphas);
    let mut gamma_in = Vec::with_capacity(len);
    let mut acc = F::one();
    for &a in alphas {
        acc *= a;
        gamma_in.push(acc);
    }

    let (u, w) = match rule {
        LinearRule::Mamba2 => (vc.clone(), None),
        LinearRule::Gdn => {
            // KK^T within the chunk
            let kk = mm(&kc, &kc.transpose());
            let (dk, dv) = (kc.cols(), vc.cols());
            let mut u = Tensor::zeros(&[len, dv]);
            let mut w = Tensor::zeros(&[len, dk]);
            for i in 0..len {
                let b = gates.beta(start + i);
                let mut ur: Vec<F> = vc.row(i).iter().map(|&x| b * x).collect();
                let mut wr: Vec<F> = kc.row(i).iter().map(|&x| b * gamma_in[i] * x).collect();
                for s in 0..i {
                    let l = b * gamma.at(i, s) * kk.at(i, s);
                    for (r, &x) in ur.iter_mut().zip(u.row(s)) {
                        *r -= l * x;
                    }
                    for (r, &x) in wr.iter_mut().zip(w.row(s)) {
                        *r -= l * x;
                    }
                }
                u.row_mut(i).copy_from_slice(&ur);
                w.row_mut(i).copy_from_slice(&wr);
            }
            (u, Some(w))
        }
    };

    // chunk state: Ktilde^T U with Ktilde_s = Gamma[last, s] k_s
    let mut k_tilde = kc.clone();
    for s in 0..len {
        let g = gamma.at(len - 1, s);
        for x in k_tilde.row_mut(s) {
            *x *= g;
        }
    }
    let chunk_state = mm(&k_tilde.transpose(), &u);

    let scores = with_output.then(|| {
        let mut s = mm(&qc, &kc.transpose());
        for i in 0..len {
            for j in 0..len {
                let g = if j <= i { gamma.at(i, j) } else { F::zero() };
                let x = s.at(i, j) * g;
                s.set(i, j, x);
            }
        }
        s
    });

    ChunkPlan { start, len, gamma_in, scores, u, w, chunk_state, k_tilde }
}

impl<F: Real> ChunkPlan<F> {
    /// State after this chunk given the state before it.
    fn pass_state(&self, prev: &Tensor<F>) -> Tensor<F> {
        let g_last = self.gamma_in[self.len - 1];
        let mut next = prev.scale(g_last);
        if let Some(w) = &self.w {
            // - Ktilde^T (W S_prev)
            let ws = mm(w, prev);
            let corr = mm(&self.k_tilde.transpose(), &ws);
            for (n, c) in next.data_mut().iter_mut().zip(corr.data()) {
                *n -= *c;
            }
        }
        for (n, c) in next.data_mut().iter_mut().zip(self.chunk_state.data()) {
            *n += *c;
        }
        count(2 * prev.len() as u64);
        next
    }

    /// Intra-chunk plus inter-chunk output rows.
    fn output(&self, q: &Tensor<F>, prev: &Tensor<F>) -> Tensor<F> {
        let qc = q.rows_slice(self.start, self.len);
        let scores = self.scores.as_ref().expect("output requested without scores");
        let u_eff = match &self.w {
            None => self.u.clone(),
            Some(w) => {
                let ws = mm(w, prev);
                self.u.zip_map(&ws, |a, b| a - b).expect("same shape")
            }
        };
        // intra
        let mut out = mm(scores, &u_eff);
        // inter: diag(gamma_in) Q S_prev
        let inter = mm(&qc, prev);
        for i in 0..self.len {
            let g = self.gamma_in[i];
            for (o, &x) in out.row_mut(i).iter_mut().zip(inter.row(i)) {
                *o += g * x;
            }
        }
        out
    }
}

/// Chunked scan: chunk states, state passing, intra-chunk and inter-chunk
/// outputs. A ragged final chunk is processed as a shorter chunk.
///
/// Returns the outputs and the state after each chunk's last position.
pub fn chunked_linear_forward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    gates: &Gates<F>,
    chunk: usize,
    rule: LinearRule,
    initial: Option<&RecurrentState<F>>,
) -> Result<(Tensor<F>, Vec<RecurrentState<F>>)> {
    check_qkv("chunked_linear_forward", q, k, v)?;
    check_gates("chunked_linear_forward", q.rows(), gates, rule)?;
    if chunk == 0 {
        return Err(Error::Invalid("chunk size must be positive".into()));
    }
    let (t, dk, dv) = (q.rows(), k.cols(), v.cols());
    let mut state = initial.map_or_else(|| Tensor::zeros(&[dk, dv]), |s| s.s.clone());
    let mut out = Tensor::zeros(&[t, dv]);
    let mut boundaries = Vec::with_capacity(t.div_ceil(chunk));
    let mut start = 0;
    while start < t {
        let len = chunk.min(t - start);
        let plan = plan_chunk(q, k, v, gates, rule, start, len, true);
        let o = plan.output(q, &state);
        for i in 0..len {
            out.row_mut(start + i).copy_from_slice(o.row(i));
        }
        state = plan.pass_state(&state);
        boundaries.push(RecurrentState { s: state.clone() });
        start += len;
    }
    Ok((out, boundaries))
}

/// One head of the chunked mixed-mode forward: every chunk advances the
/// recurrent state; attention chunks read out with softmax attention over
/// the whole causal prefix, linear chunks with the chunked scan.
pub fn mixed_chunked_forward<F: Real>(
    q_attn: &Tensor<F>,
    q_lin: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    gates: &Gates<F>,
    chunk: usize,
    attention_chunks: &[bool],
    rule: LinearRule,
) -> Result<Tensor<F>> {
    check_qkv("mixed_chunked_forward", q_lin, k, v)?;
    check_qkv("mixed_chunked_forward", q_attn, k, v)?;
    check_gates("mixed_chunked_forward", k.rows(), gates, rule)?;
    if chunk == 0 {
        return Err(Error::Invalid("chunk size must be positive".into()));
    }
    let (t, dk, dv) = (k.rows(), k.cols(), v.cols());
    if attention_chunks.len() != t.div_ceil(chunk) {
        return Err(Error::ScheduleMismatch { schedule: attention_chunks.len() * chunk, sequence: t });
    }
    let mut state = Tensor::zeros(&[dk, dv]);
    let mut out = Tensor::zeros(&[t, dv]);
    for (c, &is_attn) in attention_chunks.iter().enumerate() {
        let start = c * chunk;
        let len = chunk.min(t - start);
        let plan = plan_chunk(q_lin, k, v, gates, rule, start, len, !is_attn);
        if is_attn {
            for i in start..start + len {
                let o = attend(q_attn.row(i), |s| k.row(s), |s| v.row(s), i + 1, dv);
                out.row_mut(i).copy_from_slice(&o);
            }
        } else {
            let o = plan.output(q_lin, &state);
            for i in 0..len {
                out.row_mut(start + i).copy_from_slice(o.row(i));
            }
        }
        state = plan.pass_state(&state);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_inputs(rng: &mut SeededRng, t: usize, d: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (rng.normal_tensor(&[t, d], 1.0), rng.normal_tensor(&[t, d], 1.0), rng.normal_tensor(&[t, d], 1.0))
    }

    fn unit_rows(mut x: Tensor<f64>) -> Tensor<f64> {
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            x.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        x
    }

    #[test]
    fn decay_mask_examples() {
        let m = build_decay_mask(&[1.0f64; 4]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.at(i, j), if j <= i { 1.0 } else { 0.0 });
            }
        }
        let m = build_decay_mask(&[0.9f64, 0.5, 0.5]);
        assert_eq!(m.matrix().row(2), &[0.25, 0.5, 1.0]);
    }

    #[test]
    fn decay_mask_matches_product_oracle() {
        let mut rng = SeededRng::new(21);
        let a: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
        let m = build_decay_mask(&a);
        for i in 0..9 {
            for j in 0..9 {
                let expected = if j > i { 0.0 } else { (j + 1..=i).map(|s| a[s]).product() };
                assert!((m.at(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_small_cases() {
        let q = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -0.2]).unwrap();
        let v = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let o = attention_parallel(&q, &q, &v).unwrap();
        assert_eq!(o, v);

        // equal scores for both keys -> mean of values
        let q = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let k = Tensor::<f64>::from_f64(&[2, 2], &[0.5, 3.0, 0.5, -7.0]).unwrap();
        let v = Tensor::<f64>::from_f64(&[2, 1], &[2.0, 4.0]).unwrap();
        let o = attention_parallel(&q, &k, &v).unwrap();
        assert!((o.at(1, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn decode_matches_parallel_rows() {
        let mut rng = SeededRng::new(5);
        let (q, k, v) = rand_inputs(&mut rng, 5, 4);
        let par = attention_parallel(&q, &k, &v).unwrap();
        let mut cache = KvCache::new(4, 4);
        for t in 0..5 {
            let o = attention_decode_step(&mut cache, q.row(t), k.row(t), v.row(t));
            assert_eq!(cache.len(), t + 1);
            for (a, b) in o.iter().zip(par.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mamba2_boundaries() {
        let mut rng = SeededRng::new(6);
        let (q, k, v) = rand_inputs(&mut rng, 6, 3);
        let o = mamba2_parallel(&q, &k, &v, &[0.0; 6]).unwrap();
        for t in 0..6 {
            let s = dot(q.row(t), k.row(t));
            for (a, b) in o.row(t).iter().zip(v.row(t)) {
                assert!((a - s * b).abs() < 1e-12);
            }
        }
        // no decay: unnormalized causal linear attention via running sum
        let o = mamba2_parallel(&q, &k, &v, &[1.0; 6]).unwrap();
        let mut kv = [[0.0f64; 3]; 3];
        for t in 0..6 {
            for i in 0..3 {
                for j in 0..3 {
                    kv[i][j] += k.at(t, i) * v.at(t, j);
                }
            }
            for j in 0..3 {
                let e: f64 = (0..3).map(|i| q.at(t, i) * kv[i][j]).sum();
                assert!((o.at(t, j) - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mamba2_step_cases() {
        let mut st = RecurrentState::<f64>::zeros(2, 2);
        let o = mamba2_recurrent_step(&mut st, &[1.0, 2.0], &[3.0, 1.0], &[1.0, -1.0], 0.7);
        assert_eq!(o, vec![5.0, -5.0]);
        let o2 = {
            let mut s = st.clone();
            mamba2_recurrent_step(&mut s, &[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0], 0.0);
            s
        };
        assert_eq!(o2.s.data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gdn_step_cases() {
        let mut rng = SeededRng::new(31);
        let s0: Tensor<f64> = rng.normal_tensor(&[3, 2], 1.0);
        let mut st = RecurrentState { s: s0.clone() };
        gdn_recurrent_step(&mut st, &[0.0; 3], &[0.6, 0.0, 0.8], &[1.0, 1.0], 0.5, 0.0);
        assert!(st.s.max_abs_diff(&s0.scale(0.5)) < 1e-15);

        let mut st = RecurrentState::zeros(2, 2);
        gdn_recurrent_step(&mut st, &[0.0; 2], &[0.6, 0.8], &[1.0, 2.0], 1.0, 1.0);
        let expected = Tensor::from_f64(&[2, 2], &[0.6, 1.2, 0.8, 1.6]).unwrap();
        assert!(st.s.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn gdn_recalls_orthonormal_associations() {
        let m = 4;
        let mut rng = SeededRng::new(77);
        let vals: Tensor<f64> = rng.normal_tensor(&[m, 3], 1.0);
        let mut st = RecurrentState::zeros(m, 3);
        let basis = Tensor::<f64>::eye(m);
        for j in 0..m {
            gdn_recurrent_step(&mut st, &[0.0; 4], basis.row(j), vals.row(j), 1.0, 1.0);
        }
        for j in 0..m {
            let o = st.read(basis.row(j));
            for (a, b) in o.iter().zip(vals.row(j)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gdn_parallel_small_cases() {
        let mut rng = SeededRng::new(41);
        let (q, k, v) = rand_inputs(&mut rng, 1, 3);
        let o = gdn_parallel(&q, &k, &v, &[0.4], &[0.3]).unwrap();
        let s = 0.3 * dot(q.row(0), k.row(0));
        for (a, b) in o.row(0).iter().zip(v.row(0)) {
            assert!((a - s * b).abs() < 1e-14);
        }
        let (q, k, v) = rand_inputs(&mut rng, 5, 3);
        let o = gdn_parallel(&q, &k, &v, &[0.9; 5], &[0.0; 5]).unwrap();
        assert_eq!(o.max_abs(), 0.0);
    }

    #[test]
    fn gdn_parallel_matches_rollout() {
        let mut rng = SeededRng::new(42);
        let (q, k, v) = rand_inputs(&mut rng, 8, 4);
        let k = unit_rows(k);
        let a: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let par = gdn_parallel(&q, &k, &v, &a, &b).unwrap();
        let mut st = RecurrentState::zeros(4, 4);
        let rec = recurrent_rollout(&q, &k, &v, &Gates::delta(a, b), LinearRule::Gdn, &mut st).unwrap();
        assert!(par.max_abs_diff(&rec) < 1e-12);
    }

    #[test]
    fn chunked_degenerate_sizes() {
        let mut rng = SeededRng::new(43);
        let (q, k, v) = rand_inputs(&mut rng, 12, 4);
        let k = unit_rows(k);
        let a: Vec<f64> = (0..12).map(|_| rng.uniform_range(0.5, 1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        for (rule, gates) in [
            (LinearRule::Mamba2, Gates::decay(a.clone())),
            (LinearRule::Gdn, Gates::delta(a.clone(), b.clone())),
        ] {
            let par = match rule {
                LinearRule::Mamba2 => mamba2_parallel(&q, &k, &v, &a).unwrap(),
                LinearRule::Gdn => gdn_parallel(&q, &k, &v, &a, &b).unwrap(),
            };
            let mut st = RecurrentState::zeros(4, 4);
            let rec = recurrent_rollout(&q, &k, &v, &gates, rule, &mut st).unwrap();
            assert!(rec.max_abs_diff(&par) < 1e-12);
            for c in [1, 5, 12] {
                let (o, bounds) = chunked_linear_forward(&q, &k, &v, &gates, c, rule, None).unwrap();
                assert_eq!(bounds.len(), 12usize.div_ceil(c));
                assert!(o.max_abs_diff(&par) < 1e-12, "{rule:?} C={c}");
                assert!(bounds.last().unwrap().s.max_abs_diff(&st.s) < 1e-12);
            }
        }
    }

    #[test]
    fn mixed_forward_all_linear_equals_chunked() {
        let mut rng = SeededRng::new(44);
        let (q, k, v) = rand_inputs(&mut rng, 10, 4);
        let a: Vec<f64> = (0..10).map(|_| rng.uniform_range(0.5, 1.0)).collect();
        let gates = Gates::decay(a);
        let (lin, _) = chunked_linear_forward(&q, &k, &v, &gates, 4, LinearRule::Mamba2, None).unwrap();
        let mixed = mixed_chunked_forward(&q, &q, &k, &v, &gates, 4, &[false; 3], LinearRule::Mamba2).unwrap();
        assert!(mixed.max_abs_diff(&lin) < 1e-12);
        let attn = attention_parallel(&q, &k, &v).unwrap();
        let mixed = mixed_chunked_forward(&q, &q, &k, &v, &gates, 4, &[true, false, true], LinearRule::Mamba2).unwrap();
        for t in 0..10 {
            let reference = if (4..8).contains(&t) { lin.row(t) } else { attn.row(t) };
            for (x, y) in mixed.row(t).iter().zip(reference) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunked_counter_matches_four_step_formula() {
        let mut rng = SeededRng::new(45);
        let (t, d, c) = (32, 4, 8);
        let (q, k, v) = rand_inputs(&mut rng, t, d);
        let gates = Gates::decay(vec![0.9; t]);
        reset_flop_counter();
        chunked_linear_forward(&q, &k, &v, &gates, c, LinearRule::Mamba2, None).unwrap();
        let (t, d, c) = (t as u64, d as u64, c as u64);
        let expected = 4 * t * d * d + 2 * t * c * (2 * d) + 2 * t * d * d / c;
        assert_eq!(flop_count(), expected);
    }
}
