//! Elementary neural-network operations on plain tensors.
//!
//! These are the reference forms. The differentiable graph in
//! [`crate::autodiff`] carries its own fused kernels and is checked against
//! the functions here.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const NORM_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    // log(1 + e^x) without overflow
    if x > F::of(20.0) {
        x
    } else if x < F::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax with an optional additive mask (`-inf` entries give
/// exact zeros). Uses max subtraction.
pub fn row_softmax<F: Real>(x: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(shape_err("row_softmax", format!("mask {:?} vs input {:?}", m.shape(), x.shape())));
        }
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        if let Some(m) = mask {
            for (v, &mv) in row.iter_mut().zip(m.row(r)) {
                *v += mv;
            }
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        if max == F::neg_infinity() {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = if *v == F::neg_infinity() { F::zero() } else { (*v - max).exp() };
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Rotary angle for coordinate pair `pair` of a `dim`-wide vector at `pos`.
#[inline]
pub fn rope_angle(pos: usize, pair: usize, dim: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-2.0 * pair as f64 / dim as f64)
}

/// Rotates consecutive coordinate pairs of each row; row `t` sits at
/// position `t`.
pub fn rope_apply<F: Real>(x: &Tensor<F>, base: f64) -> Result<Tensor<F>> {
    rope_apply_heads(x, x.cols(), base, 0)
}

/// Rotary embedding applied independently to each `head_dim`-wide column
/// group; row `t` sits at position `start + t`.
pub fn rope_apply_heads<F: Real>(x: &Tensor<F>, head_dim: usize, base: f64, start: usize) -> Result<Tensor<F>> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::OddDimension(head_dim));
    }
    if head_dim == 0 || !x.cols().is_multiple_of(head_dim) {
        return Err(shape_err("rope", format!("{} columns not divisible by head dim {head_dim}", x.cols())));
    }
    let mut out = x.clone();
    let heads = x.cols() / head_dim;
    for t in 0..x.rows() {
        let row = out.row_mut(t);
        for i in 0..head_dim / 2 {
            let theta = rope_angle(start + t, i, head_dim, base);
            let (s, c) = (F::of(theta.sin()), F::of(theta.cos()));
            for h in 0..heads {
                let j = h * head_dim + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

/// Per-channel causal convolution. `w` is `width x d` with row 0 the tap on
/// the current position and row `j` the tap on position `t - j`.
pub fn causal_depthwise_conv<F: Real>(x: &Tensor<F>, w: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let d = x.cols();
    if w.cols() != d || bias.len() != d || w.rows() == 0 {
        return Err(shape_err(
            "causal_depthwise_conv",
            format!("input {:?}, kernel {:?}, bias {:?}", x.shape(), w.shape(), bias.shape()),
        ));
    }
    let mut out = Tensor::zeros(x.shape());
    for t in 0..x.rows() {
        let o = out.row_mut(t);
        o.copy_from_slice(bias.data());
        for j in 0..w.rows().min(t + 1) {
            let xr = x.row(t - j);
            let wr = w.row(j);
            for c in 0..d {
                o[c] += wr[c] * xr[c];
            }
        }
    }
    Ok(out)
}

/// Divides each row by `sqrt(mean(x^2) + eps)` and multiplies by `scale`.
pub fn rms_norm<F: Real>(x: &Tensor<F>, scale: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
    let d = x.cols();
    if scale.len() != d {
        return Err(shape_err("rms_norm", format!("scale {} vs width {d}", scale.len())));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|&v| v * v).sum::<F>() / F::of(d as f64);
        let inv = F::one() / (ms + F::of(eps)).sqrt();
        for (v, &s) in row.iter_mut().zip(scale.data()) {
            *v = *v * inv * s;
        }
    }
    Ok(out)
}

/// Mean/variance normalization within each `group`-wide column block,
/// followed by a per-channel scale.
pub fn group_norm<F: Real>(x: &Tensor<F>, scale: &Tensor<F>, group: usize, eps: f64) -> Result<Tensor<F>> {
    let d = x.cols();
    if scale.len() != d || group == 0 || !d.is_multiple_of(group) {
        return Err(shape_err("group_norm", format!("width {d}, group {group}, scale {}", scale.len())));
    }
    let mut out = x.clone();
    let n = F::of(group as f64);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        for g in row.chunks_mut(group) {
            let mean = g.iter().copied().sum::<F>() / n;
            let var = g.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + F::of(eps)).sqrt();
            for v in g.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        for (v, &s) in row.iter_mut().zip(scale.data()) {
            *v *= s;
        }
    }
    Ok(out)
}

/// `x / max(|x|, eps)` for every `group`-wide block of every row. An
/// exactly-zero block is reported as a degenerate key.
pub fn l2_normalize_groups<F: Real>(x: &Tensor<F>, group: usize, eps: f64) -> Result<Tensor<F>> {
    if group == 0 || !x.cols().is_multiple_of(group) {
        return Err(shape_err("l2_normalize", format!("width {} vs group {group}", x.cols())));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        for g in out.row_mut(r).chunks_mut(group) {
            let ss = g.iter().map(|&v| v * v).sum::<F>();
            if ss == F::zero() {
                return Err(Error::DegenerateKey { row: r });
            }
            let inv = F::one() / ss.sqrt().max(F::of(eps));
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient check with the fourth-order stencil
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Returns the largest
/// `|analytic - numeric| / (|analytic| + |numeric| + eps)` over coordinates.
pub fn finite_diff_grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    // absolute floor well above the round-off of the difference quotient
    const EPS: f64 = 1e-6;
    if analytic.len() != params.len() {
        return Err(shape_err("finite_diff_grad_check", "gradient length differs from parameter length"));
    }
    if h <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        let mut at = |offset: f64| -> Result<f64> {
            p[i] = orig + offset;
            let v = f(&p)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing coordinate {i}")));
            }
            Ok(v)
        };
        let (u1, d1, u2, d2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        p[i] = orig;
        let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + EPS);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let i3 = Tensor::<f64>::eye(3);
        let mut rng = SeededRng::new(3);
        let b: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        assert_eq!(i3.matmul(&b).unwrap(), b);
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t64(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a: Tensor<f64> = rng.normal_tensor(&[5, 4], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[4, 3], 1.0);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_is_exact_both_sides() {
        let mut rng = SeededRng::new(5);
        let a: Tensor<f32> = rng.normal_tensor(&[4, 4], 1.0);
        let i = Tensor::<f32>::eye(4);
        assert_eq!(i.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn softmax_examples() {
        let one = row_softmax(&t64(&[1, 1], &[3.7]), None).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let half = row_softmax(&t64(&[1, 2], &[0.0, 0.0]), None).unwrap();
        assert_eq!(half.data(), &[0.5, 0.5]);
        let s = row_softmax(&t64(&[1, 3], &[1.0, 2.0, 3.0]), None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| (v - 3.0).exp()).sum();
        for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.data()[k] - (v - 3.0).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_mask_and_degenerate_row() {
        let x = t64(&[2, 2], &[1.0, 2.0, 1.0, 2.0]);
        let ninf = f64::NEG_INFINITY;
        let m = t64(&[2, 2], &[0.0, ninf, ninf, ninf]);
        assert!(matches!(row_softmax(&x, Some(&m)), Err(Error::DegenerateRow { row: 1 })));
        let m = t64(&[2, 2], &[0.0, ninf, 0.0, 0.0]);
        let s = row_softmax(&x, Some(&m)).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn rope_examples() {
        let x = t64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rope_apply(&x, 10_000.0).unwrap(), x);
        let x = t64(&[2, 2], &[0.0, 0.0, 1.0, 0.0]);
        let r = rope_apply(&x, 123.0).unwrap();
        assert!((r.at(1, 0) - 1.0f64.cos()).abs() < 1e-15);
        assert!((r.at(1, 1) - 1.0f64.sin()).abs() < 1e-15);
        assert!(matches!(rope_apply(&t64(&[1, 3], &[0.0; 3]), 1.0), Err(Error::OddDimension(3))));
    }

    #[test]
    fn rope_preserves_row_norms() {
        let mut rng = SeededRng::new(9);
        let x: Tensor<f64> = rng.normal_tensor(&[8, 8], 1.0);
        let r = rope_apply(&x, DEFAULT_ROPE_BASE).unwrap();
        for t in 0..8 {
            let a: f64 = x.row(t).iter().map(|v| v * v).sum();
            let b: f64 = r.row(t).iter().map(|v| v * v).sum();
            assert!((a.sqrt() - b.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_examples() {
        let x = t64(&[3, 1], &[1.0, 2.0, 3.0]);
        let w = t64(&[2, 1], &[1.0, 1.0]);
        let b = t64(&[1], &[0.0]);
        assert_eq!(causal_depthwise_conv(&x, &w, &b).unwrap().data(), &[1.0, 3.0, 5.0]);

        let mut rng = SeededRng::new(2);
        let x: Tensor<f64> = rng.normal_tensor(&[6, 3], 1.0);
        let mut delta = Tensor::<f64>::zeros(&[4, 3]);
        delta.row_mut(0).fill(1.0);
        assert_eq!(causal_depthwise_conv(&x, &delta, &Tensor::zeros(&[3])).unwrap(), x);
    }

    #[test]
    fn conv_matches_padded_shift_sum() {
        let mut rng = SeededRng::new(4);
        let (t, d, width) = (7, 3, 4);
        let x: Tensor<f64> = rng.normal_tensor(&[t, d], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[width, d], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[d], 1.0);
        let y = causal_depthwise_conv(&x, &w, &b).unwrap();
        // explicit left zero padding
        let mut padded = vec![vec![0.0; d]; width - 1];
        padded.extend((0..t).map(|i| x.row(i).to_vec()));
        for i in 0..t {
            for c in 0..d {
                let mut s = b.data()[c];
                for j in 0..width {
                    s += w.at(j, c) * padded[i + width - 1 - j][c];
                }
                assert!((y.at(i, c) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = SeededRng::new(8);
        let x: Tensor<f64> = rng.normal_tensor(&[8, 2], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[3, 2], 1.0);
        let b = Tensor::zeros(&[2]);
        let base = causal_depthwise_conv(&x, &w, &b).unwrap();
        let mut xp = x.clone();
        xp.set(5, 1, 10.0);
        let pert = causal_depthwise_conv(&xp, &w, &b).unwrap();
        for t in 0..5 {
            assert_eq!(base.row(t), pert.row(t));
        }
        assert_ne!(base.row(5), pert.row(5));
    }

    #[test]
    fn rms_norm_examples() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(rms_norm(&z, &Tensor::full(&[3], 1.0), 1e-6).unwrap(), z);
        let x = t64(&[1, 2], &[3.0, 4.0]);
        let y = rms_norm(&x, &t64(&[2], &[1.0, 1.0]), 1e-300).unwrap();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_matches_formula() {
        let mut rng = SeededRng::new(12);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 6], 2.0);
        let s: Tensor<f64> = rng.normal_tensor(&[6], 1.0);
        let y = rms_norm(&x, &s, 1e-6).unwrap();
        for r in 0..4 {
            let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / 6.0;
            for c in 0..6 {
                let e = x.at(r, c) / (ms + 1e-6).sqrt() * s.data()[c];
                assert!((y.at(r, c) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_unit_rows_and_zero_guard() {
        let mut rng = SeededRng::new(1);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 8], 1.0);
        let y = l2_normalize_groups(&x, 4, NORM_EPS).unwrap();
        for r in 0..3 {
            for g in y.row(r).chunks(4) {
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let z = Tensor::<f64>::zeros(&[1, 4]);
        assert!(matches!(l2_normalize_groups(&z, 4, NORM_EPS), Err(Error::DegenerateKey { row: 0 })));
    }

    #[test]
    fn grad_check_quadratic() {
        let x = [0.3, -1.2, 2.5, 0.01];
        let err = finite_diff_grad_check(|p| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>()), &x, &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let logits = [0.2, -0.7, 1.1];
        let target = 2;
        let ce = |p: &[f64]| {
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Ok(lse - p[target])
        };
        let m = 1.1f64;
        let z: f64 = logits.iter().map(|v: &f64| (v - m).exp()).sum();
        let grad: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, v)| (v - m).exp() / z - if i == target { 1.0 } else { 0.0 })
            .collect();
        let err = finite_diff_grad_check(ce, &logits, &grad, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let r = finite_diff_grad_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
