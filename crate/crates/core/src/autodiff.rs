//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during one forward pass, in
//! execution order, so inputs always precede the operations that consume
//! them. [`Tape::backward`] walks the record once in reverse. The tape is
//! rebuilt for every training step.
//!
//! Parameters are borrowed from a [`ParamStore`] rather than copied; the
//! tape therefore cannot outlive the store, and the optimizer can only
//! mutate the store once the tape has been dropped.
//!
//! Binary elementwise operations broadcast the right operand along leading
//! axes: its shape must equal the left shape or be a suffix of it (a scalar
//! `[]` is a suffix of everything).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Scale(f64),
    AddScalar(f64),
    Powf(f64),
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    SumLast(Var),
    MeanLeading(Var),
    Outer(Var, Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    /// `ratio` holds exp(e - rowmax) / rowsum for admissible entries.
    WeightedSoftmax {
        logits: Var,
        weights: Var,
        ratio: Vec<f64>,
    },
    NarrowLast {
        src: Var,
        start: usize,
    },
    PairsToMatrix(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// The computation record for one forward pass.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradient buffers produced by [`Tape::backward`].
///
/// Only leaves (inputs registered with [`Tape::leaf`]) and parameters keep
/// their gradients; intermediate buffers are released during the sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.leaves.values().chain(self.params.values()).all(Tensor::is_finite)
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("parameter node without a store")
                .get(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// An input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient (data, frozen noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable parameter from the attached store. Registering the same
    /// parameter twice returns the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::shape(binary_name(kind), sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let inner = bv.len();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(j, &x)| f(x, bv[j % inner]))
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let name = unary_name(kind);
        match kind {
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("log of {bad}"),
                    });
                }
            }
            Unary::Powf(p) => {
                let bad = x.data().iter().find(|&&v| {
                    (v < 0.0 && p.fract() != 0.0) || (v == 0.0 && p < 0.0)
                });
                if let Some(bad) = bad {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("{bad} raised to {p}"),
                    });
                }
            }
            _ => {}
        }
        let out = x.map(|v| match kind {
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(0.0),
            Unary::Softplus => softplus(v),
            Unary::Scale(c) => c * v,
            Unary::AddScalar(c) => v + c,
            Unary::Powf(p) => v.powf(p),
            Unary::Clamp(lo, hi) => v.clamp(lo, hi),
        });
        if matches!(kind, Unary::Exp) && !out.is_finite() {
            return Err(Error::Domain {
                op: name,
                detail: "overflow".into(),
            });
        }
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Unary(kind, a), ng))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a).expect("softplus is total")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a).expect("scale is total")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a).expect("shift is total")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(Unary::Powf(p), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a).expect("clamp is total")
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product over the last two axes. Accepts `[p,q]x[q,r]`,
    /// `[b,p,q]x[q,r]`, `[p,q]x[b,q,r]` and `[b,p,q]x[b,q,r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let dims = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; dims.batch * dims.p * dims.r];
        matmul_forward(&dims, av.data(), bv.data(), &mut out);
        let out = Tensor::new(&dims.out_shape(), out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = transpose_last2(x)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Sum of all entries as a scalar `[]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some((&k, lead)) = x.shape().split_last() else {
            return Err(Error::shape("sum_last", x.shape(), &[]));
        };
        let data = x.data().chunks(k.max(1)).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(lead, data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::SumLast(a), ng))
    }

    /// Mean over the leading axis, dropping it.
    pub fn mean_leading(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some((&m, rest)) = x.shape().split_first() else {
            return Err(Error::shape("mean_leading", x.shape(), &[]));
        };
        if m == 0 {
            return Err(Error::shape("mean_leading", x.shape(), &[]));
        }
        let width = x.numel() / m;
        let mut data = vec![0.0; width];
        for row in x.data().chunks(width) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / m as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(rest, data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::MeanLeading(a), ng))
    }

    /// Outer product of two vectors.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.ndim() != 1 || vv.ndim() != 1 {
            return Err(Error::shape("outer", uv.shape(), vv.shape()));
        }
        let (n, k) = (uv.numel(), vv.numel());
        let mut data = Vec::with_capacity(n * k);
        for &x in uv.data() {
            data.extend(vv.data().iter().map(|&y| x * y));
        }
        let out = Tensor::new(&[n, k], data)?;
        let ng = self.needs(&[u, v]);
        Ok(self.push(out, Op::Outer(u, v), ng))
    }

    // ---- normalizations -----------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let k = last_dim(x, "softmax")?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(x.shape(), data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::SoftmaxLast(a), ng))
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let k = last_dim(x, "log_softmax")?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(x.shape(), data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::LogSoftmaxLast(a), ng))
    }

    /// Row-wise softmax restricted to positions where `mask` is nonzero;
    /// masked-out positions are exactly zero. `mask` broadcasts like the
    /// right operand of a binary op.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let weights = self.constant(mask.map(|m| if m != 0.0 { 1.0 } else { 0.0 }));
        self.weighted_softmax(logits, weights)
    }

    /// `alpha_ij = exp(e_ij) w_ij / sum_k exp(e_ik) w_ik` over the positions
    /// where `w > 0`. Stabilized by subtracting the admissible row maximum.
    pub fn weighted_softmax(&mut self, logits: Var, weights: Var) -> Result<Var> {
        let (e, w) = (self.value(logits), self.value(weights));
        if !is_suffix(w.shape(), e.shape()) || w.ndim() < 2 {
            return Err(Error::shape("weighted_softmax", e.shape(), w.shape()));
        }
        if w.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain {
                op: "weighted_softmax",
                detail: "weights must be finite and non-negative".into(),
            });
        }
        let k = last_dim(e, "weighted_softmax")?;
        let (ed, wd) = (e.data(), w.data());
        let mut alpha = vec![0.0; ed.len()];
        let mut ratio = vec![0.0; ed.len()];
        for (r, (arow, rrow)) in alpha.chunks_mut(k).zip(ratio.chunks_mut(k)).enumerate() {
            let base = r * k;
            let woff = base % wd.len();
            let erow = &ed[base..base + k];
            let wrow = &wd[woff..woff + k];
            let max = erow
                .iter()
                .zip(wrow)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&e, _)| e)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut s = 0.0;
            for j in 0..k {
                if wrow[j] > 0.0 {
                    rrow[j] = (erow[j] - max).exp();
                    arow[j] = rrow[j] * wrow[j];
                    s += arow[j];
                }
            }
            arow.iter_mut().for_each(|v| *v /= s);
            rrow.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(e.shape(), alpha)?;
        let ng = self.needs(&[logits, weights]);
        Ok(self.push(
            out,
            Op::WeightedSoftmax {
                logits,
                weights,
                ratio,
            },
            ng,
        ))
    }

    // ---- indexing ------------------------------------------------------

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let k = last_dim(x, "narrow_last")?;
        if start + len > k {
            return Err(Error::shape("narrow_last", x.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(x.numel() / k * len);
        for row in x.data().chunks(k) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::NarrowLast { src: a, start }, ng))
    }

    /// Mirrors a vector over the strict upper triangle (row-major pair order,
    /// see [`pair_index`]) into a symmetric `[n,n]` matrix with constant
    /// diagonal `diag`.
    pub fn pairs_to_matrix(&mut self, pairs: Var, n: usize, diag: f64) -> Result<Var> {
        let x = self.value(pairs);
        if x.shape() != [n * (n.saturating_sub(1)) / 2] {
            return Err(Error::shape("pairs_to_matrix", x.shape(), &[n * (n.saturating_sub(1)) / 2]));
        }
        let out = pairs_matrix(x.data(), n, diag);
        let ng = self.needs(&[pairs]);
        Ok(self.push(out, Op::PairsToMatrix(pairs), ng))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every leaf
    /// and parameter that influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before the loss was recorded".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                op => self.propagate(op, Var(i), &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, at: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = self.value(at);
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let inner = bv.len();
                let gd = g.data();
                if self.wants(a) {
                    let da: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => gd.iter().enumerate().map(|(j, &g)| g * bv[j % inner]).collect(),
                    };
                    self.accumulate(grads, a, da)?;
                }
                if self.wants(b) {
                    let mut db = vec![0.0; inner];
                    for (j, &gj) in gd.iter().enumerate() {
                        db[j % inner] += match kind {
                            Binary::Add => gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * av[j],
                        };
                    }
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(a).data();
                let y = out.data();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| {
                        gj * match kind {
                            Unary::Exp => y[j],
                            Unary::Log => 1.0 / x[j],
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Tanh => 1.0 - y[j] * y[j],
                            Unary::Relu => (x[j] > 0.0) as u8 as f64,
                            Unary::Softplus => sigmoid(x[j]),
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Powf(p) => p * x[j].powf(p - 1.0),
                            Unary::Clamp(lo, hi) => (x[j] >= lo && x[j] <= hi) as u8 as f64,
                        }
                    })
                    .collect();
                self.accumulate(grads, a, da)?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let dims = matmul_dims(av.shape(), bv.shape())?;
                let (wa, wb) = (self.wants(a), self.wants(b));
                let mut da = wa.then(|| vec![0.0; av.numel()]);
                let mut db = wb.then(|| vec![0.0; bv.numel()]);
                matmul_backward(&dims, av.data(), bv.data(), g.data(), da.as_deref_mut(), db.as_deref_mut());
                if let Some(da) = da {
                    self.accumulate(grads, a, da)?;
                }
                if let Some(db) = db {
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Transpose(a) => {
                let back = transpose_last2(g)?;
                self.accumulate(grads, a, back.into_data())?;
            }
            Op::Reshape(a) | Op::PairsToMatrix(a) if matches!(op, Op::Reshape(_)) => {
                self.accumulate(grads, a, g.data().to_vec())?;
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                let gv = g.data()[0];
                self.accumulate(grads, a, vec![gv; n])?;
            }
            Op::SumLast(a) => {
                let x = self.value(a);
                let k = *x.shape().last().unwrap();
                let mut da = vec![0.0; x.numel()];
                for (chunk, &gv) in da.chunks_mut(k.max(1)).zip(g.data()) {
                    chunk.iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, a, da)?;
            }
            Op::MeanLeading(a) => {
                let x = self.value(a);
                let m = x.shape()[0];
                let inv = 1.0 / m as f64;
                let mut da = Vec::with_capacity(x.numel());
                for _ in 0..m {
                    da.extend(g.data().iter().map(|v| v * inv));
                }
                self.accumulate(grads, a, da)?;
            }
            Op::Outer(u, v) => {
                let (uv, vv) = (self.value(u).data(), self.value(v).data());
                let k = vv.len();
                if self.wants(u) {
                    let du = g.data().chunks(k).map(|row| row.iter().zip(vv).map(|(a, b)| a * b).sum()).collect();
                    self.accumulate(grads, u, du)?;
                }
                if self.wants(v) {
                    let mut dv = vec![0.0; k];
                    for (row, &ui) in g.data().chunks(k).zip(uv) {
                        for (d, &gj) in dv.iter_mut().zip(row) {
                            *d += gj * ui;
                        }
                    }
                    self.accumulate(grads, v, dv)?;
                }
            }
            Op::SoftmaxLast(a) => {
                let k = *out.shape().last().unwrap();
                let mut da = vec![0.0; out.numel()];
                for ((d, y), gr) in da.chunks_mut(k).zip(out.data().chunks(k)).zip(g.data().chunks(k)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, a, da)?;
            }
            Op::LogSoftmaxLast(a) => {
                let k = *out.shape().last().unwrap();
                let mut da = vec![0.0; out.numel()];
                for ((d, y), gr) in da.chunks_mut(k).zip(out.data().chunks(k)).zip(g.data().chunks(k)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..k {
                        d[j] = gr[j] - y[j].exp() * gs;
                    }
                }
                self.accumulate(grads, a, da)?;
            }
            Op::WeightedSoftmax {
                logits,
                weights,
                ref ratio,
            } => {
                let k = *out.shape().last().unwrap();
                let wd = self.value(weights).data();
                let wlen = wd.len();
                let (wl, ww) = (self.wants(logits), self.wants(weights));
                let mut de = vec![0.0; out.numel()];
                let mut dw = vec![0.0; wlen];
                for (r, (arow, grow)) in out.data().chunks(k).zip(g.data().chunks(k)).enumerate() {
                    let base = r * k;
                    let dot: f64 = arow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let woff = base % wlen;
                    for j in 0..k {
                        if wd[woff + j] > 0.0 {
                            let centered = grow[j] - dot;
                            de[base + j] = arow[j] * centered;
                            dw[woff + j] += ratio[base + j] * centered;
                        }
                    }
                }
                if wl {
                    self.accumulate(grads, logits, de)?;
                }
                if ww {
                    self.accumulate(grads, weights, dw)?;
                }
            }
            Op::NarrowLast { src, start } => {
                let x = self.value(src);
                let k = *x.shape().last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut da = vec![0.0; x.numel()];
                for (d, gr) in da.chunks_mut(k).zip(g.data().chunks(len)) {
                    d[start..start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, src, da)?;
            }
            Op::PairsToMatrix(a) => {
                let n = out.shape()[0];
                let gd = g.data();
                let mut da = Vec::with_capacity(n * (n - 1) / 2);
                for s in 0..n {
                    for t in s + 1..n {
                        da.push(gd[s * n + t] + gd[t * n + s]);
                    }
                }
                self.accumulate(grads, a, da)?;
            }
            Op::Reshape(_) => unreachable!(),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, d: Vec<f64>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(&d) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(Tensor::new(self.shape(v), d)?),
        }
        Ok(())
    }
}

/// Position of pair `(s, t)`, `s < t`, in row-major strict-upper-triangle order.
pub fn pair_index(n: usize, s: usize, t: usize) -> usize {
    debug_assert!(s < t && t < n);
    s * n - s * (s + 1) / 2 + (t - s - 1)
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

pub(crate) fn pairs_matrix(pairs: &[f64], n: usize, diag: f64) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    let d = m.data_mut();
    let mut p = 0;
    for s in 0..n {
        d[s * n + s] = diag;
        for t in s + 1..n {
            d[s * n + t] = pairs[p];
            d[t * n + s] = pairs[p];
            p += 1;
        }
    }
    m
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn last_dim(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(Error::shape(op, x.shape(), &[])),
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    }
}

fn unary_name(kind: Unary) -> &'static str {
    match kind {
        Unary::Exp => "exp",
        Unary::Log => "log",
        Unary::Sigmoid => "sigmoid",
        Unary::Tanh => "tanh",
        Unary::Relu => "relu",
        Unary::Softplus => "softplus",
        Unary::Scale(_) => "scale",
        Unary::AddScalar(_) => "add_scalar",
        Unary::Powf(_) => "powf",
        Unary::Clamp(..) => "clamp",
    }
}

fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let (batch, r, c) = match *x.shape() {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => return Err(Error::shape("transpose", x.shape(), &[0, 0])),
    };
    let src = x.data();
    let mut data = vec![0.0; src.len()];
    for bi in 0..batch {
        let off = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                data[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape.swap(nd - 1, nd - 2);
    Tensor::new(&shape, data)
}

#[derive(Debug)]
struct MatMulDims {
    batch: usize,
    p: usize,
    q: usize,
    r: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatMulDims {
    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.p, self.r]
        } else {
            vec![self.p, self.r]
        }
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let bad = || Error::shape("matmul", a, b);
    let (ab, p, q) = match *a {
        [p, q] => (None, p, q),
        [n, p, q] => (Some(n), p, q),
        _ => return Err(bad()),
    };
    let (bb, q2, r) = match *b {
        [q, r] => (None, q, r),
        [n, q, r] => (Some(n), q, r),
        _ => return Err(bad()),
    };
    if q != q2 {
        return Err(bad());
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return Err(bad()),
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatMulDims {
        batch,
        p,
        q,
        r,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    })
}

/// `c = a * b + beta * c` for row-major operands addressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every address the kernel reads or
    // writes inside the borrowed slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_forward(d: &MatMulDims, a: &[f64], b: &[f64], c: &mut [f64]) {
    let (p, q, r) = (d.p, d.q, d.r);
    if !d.b_batched {
        // [b*p, q] x [q, r] in one call
        let rows = if d.a_batched { d.batch * p } else { p };
        gemm(rows, q, r, a, (q, 1), b, (r, 1), c, 0.0);
        return;
    }
    for i in 0..d.batch {
        let ai = if d.a_batched { &a[i * p * q..(i + 1) * p * q] } else { a };
        let bi = &b[i * q * r..(i + 1) * q * r];
        gemm(p, q, r, ai, (q, 1), bi, (r, 1), &mut c[i * p * r..(i + 1) * p * r], 0.0);
    }
}

fn matmul_backward(
    d: &MatMulDims,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (p, q, r) = (d.p, d.q, d.r);
    if !d.b_batched {
        let rows = if d.a_batched { d.batch * p } else { p };
        if let Some(da) = da {
            // dA = G B^T
            gemm(rows, r, q, g, (r, 1), b, (1, r), da, 0.0);
        }
        if let Some(db) = db {
            // dB = A^T G
            gemm(q, rows, r, a, (1, q), g, (r, 1), db, 0.0);
        }
        return;
    }
    let mut da = da;
    let mut db = db;
    for i in 0..d.batch {
        let ai = if d.a_batched { &a[i * p * q..(i + 1) * p * q] } else { a };
        let bi = &b[i * q * r..(i + 1) * q * r];
        let gi = &g[i * p * r..(i + 1) * p * r];
        if let Some(da) = da.as_deref_mut() {
            if d.a_batched {
                gemm(p, r, q, gi, (r, 1), bi, (1, r), &mut da[i * p * q..(i + 1) * p * q], 0.0);
            } else {
                gemm(p, r, q, gi, (r, 1), bi, (1, r), da, 1.0);
            }
        }
        if let Some(db) = db.as_deref_mut() {
            gemm(q, p, r, ai, (1, q), gi, (r, 1), &mut db[i * q * r..(i + 1) * q * r], 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[0.3, -1.0, 2.5, 7.0]));
        let c = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(c), tape.value(m));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.1, 1.0, 42.0]));
        let l = tape.log(x).unwrap();
        let e = tape.exp(l).unwrap();
        assert!(tape.value(e).max_abs_diff(tape.value(x)) < 1e-12);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn broadcast_requires_suffix_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let ok = tape.constant(Tensor::zeros(&[3]));
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(a, ok).is_ok());
        assert!(matches!(tape.add(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_gives_ones_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.leaf(t(&[3], &[-4.0, 0.5, 9.0]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), tape.value(y));
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let e = tape.constant(t(&[3, 3], &[0.5, 0.5, 0.5, 2.0, 7.0, -1.0, 2.0, 1.0, 0.0]));
        let mask = t(&[3, 3], &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let a = tape.masked_softmax(e, &mask).unwrap();
        let v = tape.value(a);
        for j in 0..3 {
            assert!((v.get(&[0, j]) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v.get(&[1, 1]), 1.0);
        assert_eq!(v.get(&[1, 0]), 0.0);
        let expect = [0.665_240_955_774_821_6, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (j, want) in expect.iter().enumerate() {
            assert!((v.get(&[2, j]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn all_false_mask_row_is_degenerate() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            tape.masked_softmax(e, &mask),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn backward_on_unrecorded_loss_is_state_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn pair_index_matches_enumeration() {
        let n = 7;
        let mut p = 0;
        for s in 0..n {
            for t in s + 1..n {
                assert_eq!(pair_index(n, s, t), p);
                p += 1;
            }
        }
        assert_eq!(p, pair_count(n));
    }
}
