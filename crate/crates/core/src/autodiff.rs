//! Tape-based reverse-mode differentiation over tensors.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the tape visits every node after all of its consumers. Sequence-aware
//! operations (rotary embedding, causal convolution and the three mixers)
//! treat the `rows` of their inputs as `n_seq` consecutive sequences of
//! `seq_len` positions, and multi-head operations split columns into
//! `heads` equal blocks.

use crate::ops::{sigmoid, silu, silu_grad, softplus};
use crate::real::Real;
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry shared by the sequence-aware operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub heads: usize,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    LogDecay { pre: Var, a_log: Var },
    RmsNorm { x: Var, scale: Var, inv: Vec<F> },
    GroupNorm { x: Var, scale: Var, group: usize, xhat: Vec<F>, inv: Vec<F> },
    L2Norm { x: Var, group: usize, inv: Vec<(F, bool)> },
    Rope { x: Var, head_dim: usize, base: f64, seq_len: usize },
    Conv { x: Var, w: Var, b: Var, seq_len: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, layout: SeqLayout, probs: Vec<F> },
    DecayLinear { q: Var, k: Var, v: Var, log_alpha: Var, layout: SeqLayout, gamma: Vec<F>, qk: Vec<F> },
    DeltaRule { q: Var, k: Var, v: Var, log_alpha: Var, beta: Var, layout: SeqLayout, saved: Vec<DeltaSaved<F>> },
    SelectRows { a: Var, b: Var, take_a: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<F>, count: usize },
    MeanSquare(Var),
}

struct DeltaSaved<F> {
    gamma: Vec<F>,
    qk: Vec<F>,
    kk: Vec<F>,
    u: Vec<F>,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<F>) -> Tensor<F> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// A recording of tensor operations.
#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn gcausal_softmax<F: Real>(s: &mut [F], t: usize) {
    for i in 0..t {
        let row = &mut s[i * t..(i + 1) * t];
        let max = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for x in row[..=i].iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = F::one() / sum;
        for x in row[..=i].iter_mut() {
            *x *= inv;
        }
        for x in row[i + 1..].iter_mut() {
            *x = F::zero();
        }
    }
}

/// `Gamma[t][s] = exp(L_t - L_s)` for `s <= t` from per-position log decays.
fn decay_matrix<F: Real>(log_alpha: &Tensor<F>, seq: usize, head: usize, t: usize) -> Vec<F> {
    let mut cum = Vec::with_capacity(t);
    let mut acc = F::zero();
    for p in 0..t {
        acc += log_alpha.at(seq * t + p, head);
        cum.push(acc);
    }
    let mut gamma = vec![F::zero(); t * t];
    for i in 0..t {
        for j in 0..=i {
            gamma[i * t + j] = (cum[i] - cum[j]).exp();
        }
    }
    gamma
}

/// Accumulates `dGamma o Gamma` into per-position log-decay gradients.
fn decay_backward<F: Real>(d_gamma_times_gamma: &[F], t: usize, out: &mut [F], stride: usize) {
    // dL_t = sum_s<t g[t][s] - sum_i>t g[i][t]; d log_alpha_s = sum_{t>=s} dL_t
    let mut dl = vec![F::zero(); t];
    for i in 0..t {
        for j in 0..i {
            let g = d_gamma_times_gamma[i * t + j];
            dl[i] += g;
            dl[j] -= g;
        }
    }
    let mut acc = F::zero();
    for p in (0..t).rev() {
        acc += dl[p];
        out[p * stride] += acc;
    }
}

fn head_ref<F: Real>(data: &[F], width: usize, seq: usize, t: usize, head: usize, dh: usize) -> MatRef<'_, F> {
    MatRef::new(data, seq * t * width + head * dh, t, dh, width, 1)
}

fn head_mut<F: Real>(data: &mut [F], width: usize, seq: usize, t: usize, head: usize, dh: usize) -> MatMut<'_, F> {
    MatMut::new(data, seq * t * width + head * dh, t, dh, width, 1)
}

fn square_ref<F: Real>(data: &[F], t: usize) -> MatRef<'_, F> {
    MatRef::new(data, 0, t, t, t, 1)
}

fn square_mut<F: Real>(data: &mut [F], t: usize) -> MatMut<'_, F> {
    MatMut::new(data, 0, t, t, t, 1)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("graph matmul shapes");
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("graph add shapes");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("graph mul shapes");
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a per-column bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        assert_eq!(bias.len(), out.cols(), "bias width");
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// `-softplus(pre) * exp(a_log)` per column: log of a decay in `(0, 1)`.
    pub fn log_decay(&mut self, pre: Var, a_log: Var) -> Var {
        let a: Vec<F> = self.value(a_log).data().iter().map(|x| x.exp()).collect();
        let mut out = self.value(pre).clone();
        assert_eq!(a.len(), out.cols(), "decay width");
        for r in 0..out.rows() {
            for (o, &aa) in out.row_mut(r).iter_mut().zip(&a) {
                *o = -softplus(*o) * aa;
            }
        }
        self.push(out, Op::LogDecay { pre, a_log }, &[pre, a_log])
    }

    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let s = self.value(scale).data().to_vec();
        let d = xv.cols();
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::of(d as f64);
            let iv = F::one() / (ms + F::of(eps)).sqrt();
            for (v, &sc) in row.iter_mut().zip(&s) {
                *v = *v * iv * sc;
            }
            inv.push(iv);
        }
        self.push(out, Op::RmsNorm { x, scale, inv }, &[x, scale])
    }

    /// Mean/variance normalization per `group` columns, then a per-column scale.
    pub fn group_norm(&mut self, x: Var, scale: Var, group: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let s = self.value(scale).data().to_vec();
        let mut xhat = xv.data().to_vec();
        let mut inv = Vec::with_capacity(xhat.len() / group);
        let n = F::of(group as f64);
        for g in xhat.chunks_mut(group) {
            let mean = g.iter().copied().sum::<F>() / n;
            let var = g.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let iv = F::one() / (var + F::of(eps)).sqrt();
            for v in g.iter_mut() {
                *v = (*v - mean) * iv;
            }
            inv.push(iv);
        }
        let d = xv.cols();
        let data = xhat.iter().enumerate().map(|(i, &v)| v * s[i % d]).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(out, Op::GroupNorm { x, scale, group, xhat, inv }, &[x, scale])
    }

    /// L2 normalization of each `group`-wide block, `x / max(|x|, eps)`.
    pub fn l2_norm(&mut self, x: Var, group: usize, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let mut inv = Vec::with_capacity(out.len() / group);
        for g in out.data_mut().chunks_mut(group) {
            let norm = g.iter().map(|&v| v * v).sum::<F>().sqrt();
            let clamped = norm < F::of(eps);
            let iv = F::one() / norm.max(F::of(eps));
            for v in g.iter_mut() {
                *v *= iv;
            }
            inv.push((iv, clamped));
        }
        self.push(out, Op::L2Norm { x, group, inv }, &[x])
    }

    /// Rotary embedding per head; row `r` sits at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, head_dim: usize, base: f64, seq_len: usize) -> Var {
        let out = rope_rows(self.value(x), head_dim, base, seq_len, false);
        self.push(out, Op::Rope { x, head_dim, base, seq_len }, &[x])
    }

    /// Per-channel causal convolution within each sequence
    /// (`w` row `j` taps position `t - j`).
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var, seq_len: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let d = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..xv.rows() {
            let pos = r % seq_len;
            let o = out.row_mut(r);
            o.copy_from_slice(bv.data());
            for j in 0..wv.rows().min(pos + 1) {
                let (xr, wr) = (xv.row(r - j), wv.row(j));
                for c in 0..d {
                    o[c] += wr[c] * xr[c];
                }
            }
        }
        self.push(out, Op::Conv { x, w, b, seq_len }, &[x, w, b])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Multi-head causal softmax attention with `1/sqrt(d_head)` scaling.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: SeqLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dk, dv) = (qv.rows(), qv.cols(), vv.cols());
        let t = layout.seq_len;
        let (hk, hv) = (dk / layout.heads, dv / layout.heads);
        let scale = F::one() / F::of(hk as f64).sqrt();
        let n_seq = n / t;
        let mut probs = vec![F::zero(); n_seq * layout.heads * t * t];
        let mut out = Tensor::zeros(&[n, dv]);
        for s in 0..n_seq {
            for h in 0..layout.heads {
                let p = &mut probs[(s * layout.heads + h) * t * t..][..t * t];
                gemm(
                    scale,
                    head_ref(qv.data(), dk, s, t, h, hk),
                    head_ref(kv.data(), dk, s, t, h, hk).t(),
                    F::zero(),
                    square_mut(p, t),
                );
                gcausal_softmax(p, t);
                gemm(
                    F::one(),
                    square_ref(p, t),
                    head_ref(vv.data(), dv, s, t, h, hv),
                    F::zero(),
                    head_mut(out.data_mut(), dv, s, t, h, hv),
                );
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v])
    }

    /// Multi-head decayed linear attention `(Gamma o QK^T) V` with
    /// `log_alpha` holding one log decay per row and head.
    pub fn decay_linear(&mut self, q: Var, k: Var, v: Var, log_alpha: Var, layout: SeqLayout) -> Var {
        let (qv, kv, vv, lv) = (self.value(q), self.value(k), self.value(v), self.value(log_alpha));
        let (n, dk, dv) = (qv.rows(), qv.cols(), vv.cols());
        let t = layout.seq_len;
        let (hk, hv) = (dk / layout.heads, dv / layout.heads);
        let n_seq = n / t;
        let blocks = n_seq * layout.heads;
        let mut gamma_all = Vec::with_capacity(blocks * t * t);
        let mut qk_all = vec![F::zero(); blocks * t * t];
        let mut out = Tensor::zeros(&[n, dv]);
        let mut a = vec![F::zero(); t * t];
        for s in 0..n_seq {
            for h in 0..layout.heads {
                let idx = s * layout.heads + h;
                let gamma = decay_matrix(lv, s, h, t);
                let qk = &mut qk_all[idx * t * t..][..t * t];
                gemm(
                    F::one(),
                    head_ref(qv.data(), dk, s, t, h, hk),
                    head_ref(kv.data(), dk, s, t, h, hk).t(),
                    F::zero(),
                    square_mut(qk, t),
                );
                for ((a, &g), &m) in a.iter_mut().zip(&gamma).zip(qk.iter()) {
                    *a = g * m;
                }
                gemm(
                    F::one(),
                    square_ref(&a, t),
                    head_ref(vv.data(), dv, s, t, h, hv),
                    F::zero(),
                    head_mut(out.data_mut(), dv, s, t, h, hv),
                );
                gamma_all.extend_from_slice(&gamma);
            }
        }
        self.push(
            out,
            Op::DecayLinear { q, k, v, log_alpha, layout, gamma: gamma_all, qk: qk_all },
            &[q, k, v, log_alpha],
        )
    }

    /// Multi-head gated delta rule in parallel form,
    /// `(Gamma o QK^T) [I + strictLower(diag(beta)(Gamma o KK^T))]^{-1} diag(beta) V`.
    pub fn delta_rule(&mut self, q: Var, k: Var, v: Var, log_alpha: Var, beta: Var, layout: SeqLayout) -> Var {
        let (qv, kv, vv, lv, bv) =
            (self.value(q), self.value(k), self.value(v), self.value(log_alpha), self.value(beta));
        let (n, dk, dv) = (qv.rows(), qv.cols(), vv.cols());
        let t = layout.seq_len;
        let (hk, hv) = (dk / layout.heads, dv / layout.heads);
        let n_seq = n / t;
        let mut saved = Vec::with_capacity(n_seq * layout.heads);
        let mut out = Tensor::zeros(&[n, dv]);
        let mut a = vec![F::zero(); t * t];
        for s in 0..n_seq {
            for h in 0..layout.heads {
                let gamma = decay_matrix(lv, s, h, t);
                let mut qk = vec![F::zero(); t * t];
                let mut kk = vec![F::zero(); t * t];
                let kh = head_ref(kv.data(), dk, s, t, h, hk);
                gemm(F::one(), head_ref(qv.data(), dk, s, t, h, hk), kh.t(), F::zero(), square_mut(&mut qk, t));
                gemm(F::one(), kh, kh.t(), F::zero(), square_mut(&mut kk, t));
                // forward substitution for U
                let vh = head_ref(vv.data(), dv, s, t, h, hv);
                let mut u = vec![F::zero(); t * hv];
                for i in 0..t {
                    let b = bv.at(s * t + i, h);
                    let (done, rest) = u.split_at_mut(i * hv);
                    let ui = &mut rest[..hv];
                    for (c, x) in ui.iter_mut().enumerate() {
                        *x = b * vh.get(i, c);
                    }
                    for j in 0..i {
                        let l = b * gamma[i * t + j] * kk[i * t + j];
                        for (x, &y) in ui.iter_mut().zip(&done[j * hv..(j + 1) * hv]) {
                            *x -= l * y;
                        }
                    }
                }
                for ((a, &g), &m) in a.iter_mut().zip(&gamma).zip(&qk) {
                    *a = g * m;
                }
                gemm(
                    F::one(),
                    square_ref(&a, t),
                    MatRef::new(&u, 0, t, hv, hv, 1),
                    F::zero(),
                    head_mut(out.data_mut(), dv, s, t, h, hv),
                );
                saved.push(DeltaSaved { gamma, qk, kk, u });
            }
        }
        self.push(
            out,
            Op::DeltaRule { q, k, v, log_alpha, beta, layout, saved },
            &[q, k, v, log_alpha, beta],
        )
    }

    /// Row `r` from `a` when `take_a[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "select_rows shapes");
        assert_eq!(take_a.len(), av.rows(), "select_rows mask length");
        let mut out = bv.clone();
        for (r, &ta) in take_a.iter().enumerate() {
            if ta {
                out.row_mut(r).copy_from_slice(av.row(r));
            }
        }
        self.push(out, Op::SelectRows { a, b, take_a: take_a.to_vec() }, &[a, b])
    }

    /// Mean token cross-entropy over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows(), "one target slot per row");
        let c = lv.cols();
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut sum = F::zero();
            for (p, &x) in p.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in p.iter_mut() {
                *p /= sum;
            }
            total += max + sum.ln() - row[tgt];
            count += 1;
        }
        let loss = if count == 0 { F::zero() } else { total / F::of(count as f64) };
        let out = Tensor::from_vec(&[1, 1], vec![loss]).expect("scalar");
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, &[logits])
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum_squares() / F::of(xv.len() as f64);
        let out = Tensor::from_vec(&[1, 1], vec![m]).expect("scalar");
        self.push(out, Op::MeanSquare(x), &[x])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = self.value(loss);
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<F>, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        macro_rules! grad_of {
            ($v:expr) => {{
                let shape = self.nodes[$v.0].value.shape().to_vec();
                grads[$v.0].get_or_insert_with(|| Tensor::zeros(&shape))
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bv = val(*b);
                    let ga = grad_of!(*a);
                    gemm(F::one(), dy.view(), bv.view().t(), F::one(), ga.view_mut());
                }
                if self.wants(*b) {
                    let av = val(*a);
                    let gb = grad_of!(*b);
                    gemm(F::one(), av.view().t(), dy.view(), F::one(), gb.view_mut());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let g = grad_of!(v);
                        for (g, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = val(*b).data().to_vec();
                    let g = grad_of!(*a);
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(dy.data()).zip(&bv) {
                        *g += d * o;
                    }
                }
                if self.wants(*b) {
                    let av = val(*a).data().to_vec();
                    let g = grad_of!(*b);
                    for ((g, &d), &o) in g.data_mut().iter_mut().zip(dy.data()).zip(&av) {
                        *g += d * o;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    let g = grad_of!(*x);
                    for (g, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *g += d;
                    }
                }
                if self.wants(*b) {
                    let g = grad_of!(*b);
                    let gd = g.data_mut();
                    for r in 0..dy.rows() {
                        for (g, &d) in gd.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x);
                let g = grad_of!(*x);
                for ((g, &d), &xx) in g.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                    *g += d * silu_grad(xx);
                }
            }
            Op::Sigmoid(x) => {
                let g = grad_of!(*x);
                for ((g, &d), &y) in g.data_mut().iter_mut().zip(dy.data()).zip(node.value.data()) {
                    *g += d * y * (F::one() - y);
                }
            }
            Op::LogDecay { pre, a_log } => {
                let pv = val(*pre);
                let a: Vec<F> = val(*a_log).data().iter().map(|x| x.exp()).collect();
                if self.wants(*pre) {
                    let g = grad_of!(*pre);
                    let h = a.len();
                    for (i, (g, &d)) in g.data_mut().iter_mut().zip(dy.data()).enumerate() {
                        *g -= d * sigmoid(pv.data()[i]) * a[i % h];
                    }
                }
                if self.wants(*a_log) {
                    let g = grad_of!(*a_log);
                    let gd = g.data_mut();
                    for r in 0..dy.rows() {
                        for ((g, &d), &y) in gd.iter_mut().zip(dy.row(r)).zip(node.value.row(r)) {
                            *g += d * y;
                        }
                    }
                }
            }
            Op::RmsNorm { x, scale, inv } => {
                let (xv, sv) = (val(*x), val(*scale).data().to_vec());
                let d = xv.cols();
                if self.wants(*scale) {
                    let g = grad_of!(*scale);
                    let gd = g.data_mut();
                    for r in 0..xv.rows() {
                        for ((g, &dd), &xx) in gd.iter_mut().zip(dy.row(r)).zip(xv.row(r)) {
                            *g += dd * xx * inv[r];
                        }
                    }
                }
                if self.wants(*x) {
                    let g = grad_of!(*x);
                    let nd = F::of(d as f64);
                    for r in 0..xv.rows() {
                        let (xr, dr) = (xv.row(r), dy.row(r));
                        let mut dot = F::zero();
                        for c in 0..d {
                            dot += dr[c] * sv[c] * xr[c] * inv[r];
                        }
                        let gr = g.row_mut(r);
                        for c in 0..d {
                            let xhat = xr[c] * inv[r];
                            gr[c] += inv[r] * (dr[c] * sv[c] - xhat * dot / nd);
                        }
                    }
                }
            }
            Op::GroupNorm { x, scale, group, xhat, inv } => {
                let d = dy.cols();
                let sv = val(*scale).data().to_vec();
                if self.wants(*scale) {
                    let g = grad_of!(*scale);
                    let gd = g.data_mut();
                    for (i, &dd) in dy.data().iter().enumerate() {
                        gd[i % d] += dd * xhat[i];
                    }
                }
                if self.wants(*x) {
                    let g = grad_of!(*x);
                    let n = F::of(*group as f64);
                    let gd = g.data_mut();
                    for (gi, iv) in inv.iter().enumerate() {
                        let base = gi * group;
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..*group {
                            let dxh = dy.data()[base + c] * sv[(base + c) % d];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[base + c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..*group {
                            let dxh = dy.data()[base + c] * sv[(base + c) % d];
                            gd[base + c] += *iv * (dxh - mean_d - xhat[base + c] * mean_dx);
                        }
                    }
                }
            }
            Op::L2Norm { x, group, inv } => {
                let y = node.value.data();
                let g = grad_of!(*x);
                let gd = g.data_mut();
                for (gi, &(iv, clamped)) in inv.iter().enumerate() {
                    let base = gi * group;
                    let mut dot = F::zero();
                    if !clamped {
                        for c in base..base + group {
                            dot += dy.data()[c] * y[c];
                        }
                    }
                    for c in base..base + group {
                        gd[c] += iv * (dy.data()[c] - y[c] * dot);
                    }
                }
            }
            Op::Rope { x, head_dim, base, seq_len } => {
                let back = rope_rows(dy, *head_dim, *base, *seq_len, true);
                let g = grad_of!(*x);
                for (g, &d) in g.data_mut().iter_mut().zip(back.data()) {
                    *g += d;
                }
            }
            Op::Conv { x, w, b, seq_len } => {
                let (xv, wv) = (val(*x), val(*w));
                let d = xv.cols();
                if self.wants(*b) {
                    let g = grad_of!(*b);
                    let gd = g.data_mut();
                    for r in 0..dy.rows() {
                        for (g, &dd) in gd.iter_mut().zip(dy.row(r)) {
                            *g += dd;
                        }
                    }
                }
                if self.wants(*w) {
                    let g = grad_of!(*w);
                    for r in 0..dy.rows() {
                        let pos = r % seq_len;
                        for j in 0..wv.rows().min(pos + 1) {
                            let (dr, xr) = (dy.row(r), xv.row(r - j));
                            let gr = g.row_mut(j);
                            for c in 0..d {
                                gr[c] += dr[c] * xr[c];
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let g = grad_of!(*x);
                    for r in 0..dy.rows() {
                        let pos = r % seq_len;
                        for j in 0..wv.rows().min(pos + 1) {
                            let dr = dy.row(r);
                            let wr = wv.row(j).to_vec();
                            let gr = g.row_mut(r - j);
                            for c in 0..d {
                                gr[c] += dr[c] * wr[c];
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let g = grad_of!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for (g, &d) in g.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *g += d;
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, *layout, probs, dy, grads);
            }
            Op::DecayLinear { q, k, v, log_alpha, layout, gamma, qk } => {
                self.decay_linear_backward([*q, *k, *v, *log_alpha], *layout, gamma, qk, dy, grads);
            }
            Op::DeltaRule { q, k, v, log_alpha, beta, layout, saved } => {
                self.delta_backward([*q, *k, *v, *log_alpha, *beta], *layout, saved, dy, grads);
            }
            Op::SelectRows { a, b, take_a } => {
                for (v, pick) in [(*a, true), (*b, false)] {
                    if self.wants(v) {
                        let g = grad_of!(v);
                        for (r, &ta) in take_a.iter().enumerate() {
                            if ta == pick {
                                for (g, &d) in g.row_mut(r).iter_mut().zip(dy.row(r)) {
                                    *g += d;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let c = val(*logits).cols();
                let scale = dy.data()[0] / F::of(*count as f64);
                let g = grad_of!(*logits);
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(tgt) = *tgt else { continue };
                    let gr = g.row_mut(r);
                    for (j, gv) in gr.iter_mut().enumerate() {
                        let onehot = if j == tgt { F::one() } else { F::zero() };
                        *gv += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::MeanSquare(x) => {
                let xv = val(*x);
                let s = dy.data()[0] * F::of(2.0 / xv.len() as f64);
                let g = grad_of!(*x);
                for (g, &xx) in g.data_mut().iter_mut().zip(xv.data()) {
                    *g += s * xx;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        probs: &[F],
        dy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dk, dv) = (qv.rows(), qv.cols(), vv.cols());
        let t = layout.seq_len;
        let (hk, hv) = (dk / layout.heads, dv / layout.heads);
        let scale = F::one() / F::of(hk as f64).sqrt();
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut dp = vec![F::zero(); t * t];
        for s in 0..n / t {
            for h in 0..layout.heads {
                let p = &probs[(s * layout.heads + h) * t * t..][..t * t];
                let doh = head_ref(dy.data(), dv, s, t, h, hv);
                gemm(F::one(), square_ref(p, t).t(), doh, F::one(), head_mut(gv.data_mut(), dv, s, t, h, hv));
                gemm(F::one(), doh, head_ref(vv.data(), dv, s, t, h, hv).t(), F::zero(), square_mut(&mut dp, t));
                for i in 0..t {
                    let row = &mut dp[i * t..(i + 1) * t];
                    let pr = &p[i * t..(i + 1) * t];
                    let dot: F = row[..=i].iter().zip(&pr[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        row[j] = pr[j] * (row[j] - dot);
                    }
                    for x in row[i + 1..].iter_mut() {
                        *x = F::zero();
                    }
                }
                gemm(
                    scale,
                    square_ref(&dp, t),
                    head_ref(kv.data(), dk, s, t, h, hk),
                    F::one(),
                    head_mut(gq.data_mut(), dk, s, t, h, hk),
                );
                gemm(
                    scale,
                    square_ref(&dp, t).t(),
                    head_ref(qv.data(), dk, s, t, h, hk),
                    F::one(),
                    head_mut(gk.data_mut(), dk, s, t, h, hk),
                );
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }

    fn decay_linear_backward(
        &self,
        [q, k, v, log_alpha]: [Var; 4],
        layout: SeqLayout,
        gamma_all: &[F],
        qk_all: &[F],
        dy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dk, dv) = (qv.rows(), qv.cols(), vv.cols());
        let t = layout.seq_len;
        let heads = layout.heads;
        let (hk, hv) = (dk / heads, dv / heads);
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut gl = Tensor::zeros(&[n, heads]);
        let mut a = vec![F::zero(); t * t];
        let mut da = vec![F::zero(); t * t];
        let mut dg = vec![F::zero(); t * t];
        for s in 0..n / t {
            for h in 0..heads {
                let idx = s * heads + h;
                let gamma = &gamma_all[idx * t * t..][..t * t];
                let qk = &qk_all[idx * t * t..][..t * t];
                for ((a, &g), &m) in a.iter_mut().zip(gamma).zip(qk) {
                    *a = g * m;
                }
                let doh = head_ref(dy.data(), dv, s, t, h, hv);
                gemm(F::one(), square_ref(&a, t).t(), doh, F::one(), head_mut(gv.data_mut(), dv, s, t, h, hv));
                gemm(F::one(), doh, head_ref(vv.data(), dv, s, t, h, hv).t(), F::zero(), square_mut(&mut da, t));
                for i in 0..t {
                    for j in 0..t {
                        let e = i * t + j;
                        if j <= i {
                            dg[e] = da[e] * qk[e] * gamma[e];
                            da[e] *= gamma[e];
                        } else {
                            dg[e] = F::zero();
                            da[e] = F::zero();
                        }
                    }
                }
                gemm(
                    F::one(),
                    square_ref(&da, t),
                    head_ref(kv.data(), dk, s, t, h, hk),
                    F::one(),
                    head_mut(gq.data_mut(), dk, s, t, h, hk),
                );
                gemm(
                    F::one(),
                    square_ref(&da, t).t(),
                    head_ref(qv.data(), dk, s, t, h, hk),
                    F::one(),
                    head_mut(gk.data_mut(), dk, s, t, h, hk),
                );
                decay_backward(&dg, t, &mut gl.data_mut()[s * t * heads + h..], heads);
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
        self.accumulate(grads, log_alpha, gl);
    }

    fn delta_backward(
        &self,
        [q, k, v, log_alpha, beta]: [Var; 5],
        layout: SeqLayout,
        saved: &[DeltaSaved<F>],
        dy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (qv, kv, vv, bv) = (self.value(q), self.value(k), self.value(v), self.value(beta));
        let (n, dk, dv) = (qv.rows(), qv.cols(), vv.cols());
        let t = layout.seq_len;
        let heads = layout.heads;
        let (hk, hv) = (dk / heads, dv / heads);
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut gl = Tensor::zeros(&[n, heads]);
        let mut gb = Tensor::zeros(&[n, heads]);
        let mut a = vec![F::zero(); t * t];
        let mut da = vec![F::zero(); t * t];
        let mut dg = vec![F::zero(); t * t];
        let mut dkk = vec![F::zero(); t * t];
        let mut du = vec![F::zero(); t * hv];
        let mut dru = vec![F::zero(); t * t];
        for s in 0..n / t {
            for h in 0..heads {
                let sv = &saved[s * heads + h];
                let (gamma, qk, kk, u) = (&sv.gamma, &sv.qk, &sv.kk, &sv.u);
                let beta_at = |i: usize| bv.at(s * t + i, h);
                for ((a, &g), &m) in a.iter_mut().zip(gamma).zip(qk) {
                    *a = g * m;
                }
                let doh = head_ref(dy.data(), dv, s, t, h, hv);
                let u_ref = MatRef::new(u, 0, t, hv, hv, 1);
                // dU = A^T dO
                gemm(F::one(), square_ref(&a, t).t(), doh, F::zero(), MatMut::new(&mut du, 0, t, hv, hv, 1));
                // dA = dO U^T (lower incl. diagonal)
                gemm(F::one(), doh, u_ref.t(), F::zero(), square_mut(&mut da, t));
                for i in 0..t {
                    for j in 0..t {
                        let e = i * t + j;
                        if j <= i {
                            dg[e] = da[e] * qk[e];
                            da[e] *= gamma[e];
                        } else {
                            dg[e] = F::zero();
                            da[e] = F::zero();
                        }
                    }
                }
                gemm(
                    F::one(),
                    square_ref(&da, t),
                    head_ref(kv.data(), dk, s, t, h, hk),
                    F::one(),
                    head_mut(gq.data_mut(), dk, s, t, h, hk),
                );
                gemm(
                    F::one(),
                    square_ref(&da, t).t(),
                    head_ref(qv.data(), dk, s, t, h, hk),
                    F::one(),
                    head_mut(gk.data_mut(), dk, s, t, h, hk),
                );
                // dR = (I + B)^{-T} dU by back substitution, in place in du
                for i in (0..t).rev() {
                    let (head, tail) = du.split_at_mut((i + 1) * hv);
                    let di = &mut head[i * hv..];
                    for j in i + 1..t {
                        let l = beta_at(j) * gamma[j * t + i] * kk[j * t + i];
                        for (x, &y) in di.iter_mut().zip(&tail[(j - i - 1) * hv..(j - i) * hv]) {
                            *x -= l * y;
                        }
                    }
                }
                let dr = &du;
                // R = diag(beta) V
                let vh = head_ref(vv.data(), dv, s, t, h, hv);
                {
                    let mut gvh = head_mut(gv.data_mut(), dv, s, t, h, hv);
                    for i in 0..t {
                        let b = beta_at(i);
                        let mut dbeta = F::zero();
                        for c in 0..hv {
                            let d = dr[i * hv + c];
                            gvh_add(&mut gvh, i, c, b * d);
                            dbeta += d * vh.get(i, c);
                        }
                        gb.data_mut()[(s * t + i) * heads + h] += dbeta;
                    }
                }
                // dB = -dR U^T, strictly lower
                gemm(
                    -F::one(),
                    MatRef::new(dr, 0, t, hv, hv, 1),
                    u_ref.t(),
                    F::zero(),
                    square_mut(&mut dru, t),
                );
                for i in 0..t {
                    let b = beta_at(i);
                    let mut dbeta = F::zero();
                    for j in 0..t {
                        let e = i * t + j;
                        if j < i {
                            let db = dru[e];
                            dbeta += db * gamma[e] * kk[e];
                            dg[e] += db * b * kk[e];
                            dkk[e] = db * b * gamma[e];
                        } else {
                            dkk[e] = F::zero();
                        }
                    }
                    gb.data_mut()[(s * t + i) * heads + h] += dbeta;
                }
                let kh = head_ref(kv.data(), dk, s, t, h, hk);
                gemm(F::one(), square_ref(&dkk, t), kh, F::one(), head_mut(gk.data_mut(), dk, s, t, h, hk));
                gemm(F::one(), square_ref(&dkk, t).t(), kh, F::one(), head_mut(gk.data_mut(), dk, s, t, h, hk));
                for (d, &g) in dg.iter_mut().zip(gamma) {
                    *d *= g;
                }
                decay_backward(&dg, t, &mut gl.data_mut()[s * t * heads + h..], heads);
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
        self.accumulate(grads, log_alpha, gl);
        self.accumulate(grads, beta, gb);
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

#[inline]
fn gvh_add<F: Real>(m: &mut MatMut<'_, F>, r: usize, c: usize, x: F) {
    m.add_at(r, c, x);
}

fn rope_rows<F: Real>(x: &Tensor<F>, head_dim: usize, base: f64, seq_len: usize, inverse: bool) -> Tensor<F> {
    assert!(head_dim.is_multiple_of(2) && x.cols().is_multiple_of(head_dim), "rope geometry");
    let heads = x.cols() / head_dim;
    let half = head_dim / 2;
    // angle table per position within a sequence
    let mut table = Vec::with_capacity(seq_len.min(x.rows()) * half);
    for p in 0..seq_len.min(x.rows()) {
        for i in 0..half {
            let th = crate::ops::rope_angle(p, i, head_dim, base);
            let s = if inverse { -th.sin() } else { th.sin() };
            table.push((F::of(s), F::of(th.cos())));
        }
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let p = r % seq_len;
        let row = out.row_mut(r);
        for i in 0..half {
            let (s, c) = table[p * half + i];
            for h in 0..heads {
                let j = h * head_dim + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
    out
}
