//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends a node that
//! holds its output value plus whatever the backward rule needs; node inputs
//! always have smaller indices, so one reverse sweep visits every node once.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{LiftError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        from: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    Reshape(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

/// Dynamic computation record for one forward pass.
#[derive(Debug)]
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    store: Option<&'p ParamStore<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_nodes: HashMap::new(),
        }
    }

    /// A tape that can reference parameters of `store` without copying them.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Records an input value. Its gradient is available from [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.owned(value, Op::Leaf)
    }

    /// Records a parameter of the attached store; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("tape was created without a parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LiftError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn require_rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        if self.shape(v).len() != 2 {
            return Err(LiftError::shape(op, self.shape(v), &[0, 0]));
        }
        Ok(self.dims(v))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.owned(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (k2, n) = self.require_rank2("matmul", b)?;
        if k != k2 {
            return Err(LiftError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.owned(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_rank2("transpose", x)?;
        let out = kernels::transpose(self.value(x).data(), m, n);
        let out = Tensor::from_vec(&[n, m], out)?;
        Ok(self.owned(out, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.owned(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.owned(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.owned(out, Op::Mul(a, b)))
    }

    /// `x[m×n] + row[n]`, the row repeated over all `m` rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.require_rank2("add_row", x)?;
        if self.value(row).numel() != n {
            return Err(LiftError::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let out = Tensor::from_vec(self.shape(x), data)?;
        Ok(self.owned(out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    /// ReLU; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.require_rank2("softmax_rows", x)?;
        let out = kernels::softmax_rows(self.value(x).data(), n);
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.owned(out, Op::Softmax(x)))
    }

    /// Per-row normalization `(x - mean) / sqrt(var + eps) * gamma + beta`,
    /// with the biased (population) variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.require_rank2("layer_norm", x)?;
        if n < 2 {
            return Err(LiftError::shape("layer_norm", self.shape(x), &[0, 2]));
        }
        if self.value(gamma).numel() != n {
            return Err(LiftError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).numel() != n {
            return Err(LiftError::shape("layer_norm", self.shape(x), self.shape(beta)));
        }
        let nf = T::from_usize(n).unwrap();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xd.chunks(n) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. With `rng = None` (eval mode) or `p = 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(LiftError::InvalidProbability(p));
        }
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &k)| v * k)
            .collect();
        let out = Tensor::from_vec(self.shape(x), data)?;
        Ok(self.owned(out, Op::Dropout { x, mask }))
    }

    /// Concatenates rank-2 tensors with equal row counts along the last dim.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| LiftError::InvalidTensor("concat of zero tensors".into()))?;
        let (m, _) = self.require_rank2("concat_last_dim", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.require_rank2("concat_last_dim", p)?;
            if mp != m {
                return Err(LiftError::shape("concat_last_dim", self.shape(first), self.shape(p)));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[m, total], out)?;
        Ok(self.owned(out, Op::Concat(parts.to_vec())))
    }

    /// Rows `from..to` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.require_rank2("slice_rows", x)?;
        if from >= to || to > m {
            return Err(LiftError::shape("slice_rows", self.shape(x), &[from, to]));
        }
        let data = self.value(x).data()[from * n..to * n].to_vec();
        let out = Tensor::from_vec(&[to - from, n], data)?;
        Ok(self.owned(out, Op::SliceRows { x, from }))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.require_rank2("gather_rows", x)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(LiftError::shape("gather_rows", self.shape(x), rows));
        }
        let xd = self.value(x).data();
        let data = rows
            .iter()
            .flat_map(|&r| xd[r * n..(r + 1) * n].iter().copied())
            .collect();
        let out = Tensor::from_vec(&[rows.len(), n], data)?;
        Ok(self.owned(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, n) = self.require_rank2("normalize_rows", x)?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(n) {
            let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            norms.push(norm);
            let denom = norm.max(eps);
            out.extend(row.iter().map(|&v| v / denom));
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.owned(out, Op::NormalizeRows { x, eps, norms }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.owned(out, Op::Reshape(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, T::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.owned(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.numel()).unwrap();
        let s = xv.data().iter().fold(T::zero(), |a, &v| a + v) / n;
        self.owned(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sign pattern of every ReLU and |·| input on the tape, in record order.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Propagates d(loss)/d(node) back through the record.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(LiftError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| (id, v))
            .filter(|(_, v)| v.0 <= loss.0)
            .collect();
        Ok(Gradients {
            grads,
            params,
            visited,
        })
    }

    fn backprop_node(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                kernels::matmul_nt_acc(g, bd, slot(grads, *a, m * k), m, n, k);
                kernels::matmul_tn_acc(ad, g, slot(grads, *b, k * n), m, k, n);
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims(*x);
                let gt = kernels::transpose(g, n, m);
                kernels::add_into(slot(grads, *x, m * n), &gt);
            }
            Op::Add(a, b) => {
                kernels::add_into(slot(grads, *a, g.len()), g);
                kernels::add_into(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                kernels::add_into(slot(grads, *a, g.len()), g);
                let gb = slot(grads, *b, g.len());
                gb.iter_mut().zip(g).for_each(|(acc, &v)| *acc = *acc - v);
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                {
                    let ga = slot(grads, *a, g.len());
                    for ((acc, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *acc = *acc + gv * bv;
                    }
                }
                let gb = slot(grads, *b, g.len());
                for ((acc, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                    *acc = *acc + gv * av;
                }
            }
            Op::AddRow(x, row) => {
                kernels::add_into(slot(grads, *x, g.len()), g);
                let n = self.value(*row).numel();
                let gr = slot(grads, *row, n);
                for grow in g.chunks(n) {
                    kernels::add_into(gr, grow);
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(acc, &v)| *acc = *acc + v * *c);
            }
            Op::Relu(x) => {
                let gx = slot(grads, *x, g.len());
                for ((acc, &v), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    if y > T::zero() {
                        *acc = *acc + v;
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let gx = slot(grads, *x, g.len());
                for ((grow, yrow), gxrow) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                    for ((acc, &gv), &yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                        *acc = *acc + yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.last_dim();
                let nf = T::from_usize(n).unwrap();
                let gam = self.value(*gamma).data();
                {
                    let gg = slot(grads, *gamma, n);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((acc, &gv), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *acc = *acc + gv * h;
                        }
                    }
                }
                {
                    let gb = slot(grads, *beta, n);
                    for grow in g.chunks(n) {
                        kernels::add_into(gb, grow);
                    }
                }
                let gx = slot(grads, *x, g.len());
                for (((grow, hrow), gxrow), &is) in g
                    .chunks(n)
                    .zip(xhat.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .zip(inv_std)
                {
                    let mut mean_gh = T::zero();
                    let mut mean_ghh = T::zero();
                    for j in 0..n {
                        let gh = grow[j] * gam[j];
                        mean_gh = mean_gh + gh;
                        mean_ghh = mean_ghh + gh * hrow[j];
                    }
                    mean_gh = mean_gh / nf;
                    mean_ghh = mean_ghh / nf;
                    for j in 0..n {
                        let gh = grow[j] * gam[j];
                        gxrow[j] = gxrow[j] + is * (gh - mean_gh - hrow[j] * mean_ghh);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for ((acc, &gv), &k) in gx.iter_mut().zip(g).zip(mask) {
                    *acc = *acc + gv * k;
                }
            }
            Op::Concat(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.dims(p);
                    let gp = slot(grads, p, m * w);
                    for i in 0..m {
                        let src = &g[i * total + offset..i * total + offset + w];
                        kernels::add_into(&mut gp[i * w..(i + 1) * w], src);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, from } => {
                let (m, n) = self.dims(*x);
                let gx = slot(grads, *x, m * n);
                kernels::add_into(&mut gx[from * n..from * n + g.len()], g);
            }
            Op::GatherRows { x, rows } => {
                let (m, n) = self.dims(*x);
                let gx = slot(grads, *x, m * n);
                for (grow, &r) in g.chunks(n).zip(rows) {
                    kernels::add_into(&mut gx[r * n..(r + 1) * n], grow);
                }
            }
            Op::NormalizeRows { x, eps, norms } => {
                let n = out.last_dim();
                let gx = slot(grads, *x, g.len());
                for (((grow, yrow), gxrow), &norm) in g
                    .chunks(n)
                    .zip(out.data().chunks(n))
                    .zip(gx.chunks_mut(n))
                    .zip(norms)
                {
                    if norm > *eps {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                        for ((acc, &gv), &yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                            *acc = *acc + (gv - yv * dot) / norm;
                        }
                    } else {
                        for (acc, &gv) in gxrow.iter_mut().zip(grow) {
                            *acc = *acc + gv / *eps;
                        }
                    }
                }
            }
            Op::Reshape(x) => kernels::add_into(slot(grads, *x, g.len()), g),
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((acc, &gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                    if v > T::zero() {
                        *acc = *acc + gv;
                    } else if v < T::zero() {
                        *acc = *acc - gv;
                    }
                }
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                let two = T::from_f64_lossy(2.0);
                for ((acc, &gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                    *acc = *acc + two * v * gv;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|acc| *acc = *acc + g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let share = g[0] / T::from_usize(n).unwrap();
                slot(grads, *x, n).iter_mut().for_each(|acc| *acc = *acc + share);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Result of one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` influences the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of records the sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Adds every recorded parameter's gradient into its accumulator in `store`.
    /// Parameters on the tape that do not reach the loss receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            let t = store.get_mut(id);
            match self.wrt(v) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    let zeros = vec![T::zero(); t.numel()];
                    t.accumulate_grad(&zeros);
                }
            }
        }
    }
}
