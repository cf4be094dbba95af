//! Dense row-major tensors.

use crate::error::{LiftError, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major and contiguous.
///
/// `grad` is only populated on parameter tensors held by a
/// [`ParamStore`](crate::ParamStore); intermediate values on the tape keep
/// their gradients in the backward pass instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(LiftError::InvalidTensor(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LiftError::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&s| s > 0), "zero-sized dimension");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a matrix from `f64` rows; handy in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LiftError::InvalidTensor("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::from_f64_lossy(v)))
            .collect();
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, (0..numel).map(&mut f).collect()).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor; a rank-1 tensor is treated as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            _ => (self.numel() / self.last_dim(), self.last_dim()),
        }
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(LiftError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), numel);
        }
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    /// Adds `g` into the gradient accumulator, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn set_grad(&mut self, g: Option<Vec<T>>) {
        if let Some(g) = &g {
            assert_eq!(g.len(), self.data.len(), "gradient length");
        }
        self.grad = g;
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossless()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossless() - b.to_f64_lossless()).abs())
            .fold(0.0, f64::max)
    }
}

/// Value-level kernels shared by the tape's forward and backward passes.
pub(crate) mod kernels {
    use crate::scalar::Scalar;

    /// `out[m×n] += a[m×k] · b[k×n]`
    pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    }

    /// `out[m×k] += g[m×n] · b[k×n]ᵀ`
    pub fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                let mut acc = T::zero();
                for (&x, &y) in g_row.iter().zip(b_row) {
                    acc = acc + x * y;
                }
                out[i * k + p] = out[i * k + p] + acc;
            }
        }
    }

    /// `out[k×n] += a[m×k]ᵀ · g[m×n]`
    pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let out_row = &mut out[p * n..(p + 1) * n];
                for (o, &gv) in out_row.iter_mut().zip(g_row) {
                    *o = *o + av * gv;
                }
            }
        }
    }

    pub fn transpose<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        out
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut sum = T::zero();
            for &v in row {
                let e = (v - max).exp();
                sum = sum + e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v = *v / sum;
            }
        }
        out
    }

    pub fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
        acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
    }
}
