//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive records its output value and enough cached state to apply
//! its vector-Jacobian product. Node ids are handed out in recording order, so
//! the tape is topologically sorted by construction and [`Tape::backward`]
//! simply walks it in reverse.
//!
//! Parameters are borrowed rather than copied: a tape built for one instance
//! holds `&Tensor` references into the model, and gradients are read back per
//! parameter node. Tapes are single-owner; parallel work uses one tape per
//! thread.

use std::borrow::Cow;

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmaxPick { x: Var, probs: Vec<f64>, index: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SelectRow(Var, usize),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Pick(Var, usize),
    SparseLinear { x: Var, terms: Vec<LinearTerm> },
}

/// One coefficient of a fixed sparse linear map: `out[out] += coef * x[input]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearTerm {
    pub out: usize,
    pub input: usize,
    pub coef: f64,
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations with cached forward values.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar loss with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Gradient for `var`, zeros when the loss does not depend on it.
    pub fn wrt_or_zeros(&self, var: Var) -> Tensor {
        self.wrt(var).unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf borrowed from the caller.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Owned trainable leaf (used by tests and finite-difference harnesses).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `1×n` (or length-`n`) row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(row).numel() != n {
            return Err(Error::Dimension(format!(
                "add_row: row of {} values for {m}x{n}",
                self.value(row).numel()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, row), ng))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| f(t)).collect();
        let shape = v.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |t| t * s)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |t| t.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Row-wise softmax. Columns with `visible[j] == false` get probability 0.
    pub fn softmax_rows(&mut self, x: Var, visible: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if let Some(vis) = visible {
            if vis.len() != n {
                return Err(Error::Dimension(format!("mask of {} for {n} columns", vis.len())));
            }
            if !vis.iter().any(|&b| b) {
                return Err(Error::Contract("softmax over a fully masked row".into()));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let o = &mut out[r * n..(r + 1) * n];
            masked_softmax_into(row, visible, o);
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), ng))
    }

    /// `log softmax(x)[index]` over the visible entries of a flat tensor.
    pub fn log_softmax_pick(&mut self, x: Var, visible: Option<&[bool]>, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(Error::Parameter(format!("pick index {index} out of {n}")));
        }
        if let Some(vis) = visible {
            if vis.len() != n {
                return Err(Error::Dimension(format!("mask of {} for {n} logits", vis.len())));
            }
            if !vis[index] {
                return Err(Error::Contract(format!("picked index {index} is masked")));
            }
        }
        let xv = self.value(x).data();
        let mut probs = vec![0.0; n];
        let logz = masked_softmax_into(xv, visible, &mut probs);
        let value = xv[index] - logz;
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(value), Op::LogSoftmaxPick { x, probs, index }, ng))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension("layer_norm gain/bias width".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            ng,
        ))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if row >= m {
            return Err(Error::Parameter(format!("row {row} out of {m}")));
        }
        let data = self.value(x).data()[row * n..(row + 1) * n].to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![1, n], data), Op::SelectRow(x, row), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if len == 0 || start + len > n {
            return Err(Error::Parameter(format!("columns {start}..{} of {n}", start + len)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of nothing".into()))?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return Err(Error::Dimension(format!("concat rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Mean over rows, giving a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(&xv[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("pick index {index} out of range")))?;
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick(x, index), ng))
    }

    /// Fixed sparse linear map `out[t.out] += t.coef * x[t.input]`, output shaped
    /// like `x`. Used for piecewise-linear selections such as top-k, where the
    /// active pieces are decided on the forward pass and held fixed for the
    /// backward pass.
    pub fn sparse_linear(&mut self, x: Var, terms: Vec<LinearTerm>) -> Result<Var> {
        let n = self.value(x).numel();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n];
        for t in &terms {
            if t.out >= n || t.input >= n {
                return Err(Error::Parameter("sparse_linear term out of range".into()));
            }
            out[t.out] += t.coef * xv[t.input];
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SparseLinear { x, terms }, ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        let shapes = self.nodes[..count].iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..count).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().1;
                let bv = self.value(b).data();
                let av = self.value(a).data();
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.accumulate(grads, a, |ga| gemm_nt(g, bv, ga, m, n, k));
                self.accumulate(grads, b, |gb| gemm_tn(av, g, gb, m, k, n));
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().0;
                let bv = self.value(b).data();
                let av = self.value(a).data();
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                self.accumulate(grads, a, |ga| gemm_nn(g, bv, ga, m, n, k));
                self.accumulate(grads, b, |gb| gemm_tn(g, av, gb, m, n, k));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            &Op::AddRow(x, row) => {
                let n = self.value(row).numel();
                self.accumulate(grads, x, |gx| add_into(gx, g));
                self.accumulate(grads, row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::Scale(x, s) => {
                self.accumulate(grads, x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += s * v;
                    }
                });
            }
            &Op::Tanh(x) => {
                let y = out.data();
                self.accumulate(grads, x, |gx| {
                    for ((o, &gv), &t) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - t * t);
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |gx| {
                    for ((o, &gv), &t) in gx.iter_mut().zip(g).zip(xv) {
                        if t > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            &Op::Abs(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |gx| {
                    for ((o, &gv), &t) in gx.iter_mut().zip(g).zip(xv) {
                        if t > 0.0 {
                            *o += gv;
                        } else if t < 0.0 {
                            *o -= gv;
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let (m, n) = out.dims2().unwrap();
                let y = out.data();
                self.accumulate(grads, x, |gx| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxPick { x, probs, index } => {
                let gv = g[0];
                self.accumulate(grads, *x, |gx| {
                    for (o, &p) in gx.iter_mut().zip(probs) {
                        *o -= gv * p;
                    }
                    gx[*index] += gv;
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = out.dims2().unwrap();
                let gamma = self.value(*gain).data();
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let xr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gamma[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx = dot(&dxhat, xr);
                        let is = inv_std[r];
                        for j in 0..n {
                            gx[r * n + j] += is / nf * (nf * dxhat[j] - sum_d - xr[j] * sum_dx);
                        }
                    }
                });
            }
            &Op::SelectRow(x, row) => {
                let n = out.numel();
                self.accumulate(grads, x, |gx| add_into(&mut gx[row * n..(row + 1) * n], g));
            }
            &Op::SliceCols { x, start } => {
                let (m, len) = out.dims2().unwrap();
                let n = self.value(x).dims2().unwrap().1;
                self.accumulate(grads, x, |gx| {
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    self.accumulate(grads, p, |gp| {
                        for r in 0..m {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = self.value(x).dims2().unwrap();
                let inv = 1.0 / m as f64;
                self.accumulate(grads, x, |gx| {
                    for r in 0..m {
                        for j in 0..n {
                            gx[r * n + j] += g[j] * inv;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(grads, x, |gx| {
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                });
            }
            &Op::Pick(x, index) => {
                let gv = g[0];
                self.accumulate(grads, x, |gx| gx[index] += gv);
            }
            Op::SparseLinear { x, terms } => {
                self.accumulate(grads, *x, |gx| {
                    for t in terms {
                        gx[t.input] += t.coef * g[t.out];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Writes the masked softmax of `x` into `out` and returns the log-normaliser.
fn masked_softmax_into(x: &[f64], visible: Option<&[bool]>, out: &mut [f64]) -> f64 {
    let vis = |j: usize| visible.is_none_or(|v| v[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if vis(j) {
            max = max.max(v);
        }
    }
    let mut denom = 0.0;
    for (j, &v) in x.iter().enumerate() {
        if vis(j) {
            let e = (v - max).exp();
            out[j] = e;
            denom += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
    max + denom.ln()
}
