//! Dense row-major tensors and strided matrix views.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

/// Dense row-major array. Most of the crate works with rank-2 tensors
/// (`rows x cols`); rank-1 tensors carry per-channel vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a tensor from `f64` literals, converting to `F`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent (1 for rank-1 tensors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|x| x * s)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Matrix product with a fixed summation order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("expected matrices, got {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = Self::zeros(&[m, n]);
        gemm(F::one(), self.view(), other.view(), F::zero(), out.view_mut());
        Ok(out)
    }

    /// Columns `[start, start + width)` as a new tensor.
    pub fn cols_slice(&self, start: usize, width: usize) -> Self {
        let r = self.rows();
        let mut out = Self::zeros(&[r, width]);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Rows `[start, start + count)` as a new tensor.
    pub fn rows_slice(&self, start: usize, count: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![count, c],
            data: self.data[start * c..(start + count) * c].to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.abs().as_f64()).fold(0.0, f64::max)
    }

    pub fn sum_squares(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| G::of(x.as_f64())).collect() }
    }

    pub(crate) fn view(&self) -> MatRef<'_, F> {
        MatRef::new(&self.data, 0, self.rows(), self.cols(), self.cols(), 1)
    }

    pub(crate) fn view_mut(&mut self) -> MatMut<'_, F> {
        let (r, c) = (self.rows(), self.cols());
        MatMut::new(&mut self.data, 0, r, c, c, 1)
    }
}

/// Read-only strided matrix window into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, F> {
    data: &'a [F],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Real> MatRef<'a, F> {
    pub(crate) fn new(data: &'a [F], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = off + (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "matrix view out of bounds");
        }
        Self { data, off, rows, cols, rs, cs }
    }

    pub(crate) fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    #[inline]
    pub(crate) fn get(&self, r: usize, c: usize) -> F {
        self.data[self.off + r * self.rs + c * self.cs]
    }
}

/// Mutable strided matrix window into a flat buffer.
pub(crate) struct MatMut<'a, F> {
    data: &'a mut [F],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Real> MatMut<'a, F> {
    pub(crate) fn new(data: &'a mut [F], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = off + (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "matrix view out of bounds");
        }
        Self { data, off, rows, cols, rs, cs }
    }

    #[inline]
    pub(crate) fn add_at(&mut self, r: usize, c: usize, x: F) {
        self.data[self.off + r * self.rs + c * self.cs] += x;
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<F: Real>(alpha: F, a: MatRef<'_, F>, b: MatRef<'_, F>, beta: F, c: MatMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.off + i * c.rs + j * c.cs;
                c.data[idx] = if beta == F::zero() { F::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked at construction; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn strided_gemm_matches_transposed_copy() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut out = Tensor::<f64>::zeros(&[3, 3]);
        gemm(1.0, a.view().t(), a.view(), 0.0, out.view_mut());
        let expected = a.transpose().matmul(&a).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn gemm_with_empty_inner_extent_scales_output() {
        let a = Tensor::<f64>::zeros(&[2, 0]);
        let b = Tensor::<f64>::zeros(&[0, 2]);
        let mut out = Tensor::full(&[2, 2], 3.0);
        gemm(1.0, a.view(), b.view(), 0.0, out.view_mut());
        assert_eq!(out.data(), &[0.0; 4]);
    }
}
