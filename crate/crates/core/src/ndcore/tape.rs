//! Reverse-mode tape.
//!
//! Every forward op evaluates eagerly and appends a node holding its value and
//! the recipe for its vector-Jacobian product. `backward` walks the nodes in
//! reverse; parameter leaves hand their gradients to the [`ParamStore`].

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Axis, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn strided(stride: [usize; 3]) -> Self {
        Self {
            stride,
            padding: [0; 3],
        }
    }
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self::strided([1, 1, 1])
    }
}

enum Op {
    Input,
    Param(ParamId),
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        spec: Conv3dSpec,
    },
    Silu(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Var, Tensor),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    MaskRows(Var, Vec<f64>),
    MeanRows(Var),
    /// Source row of every output element, `None` for empty groups.
    GroupMaxRows(Var, Vec<Option<usize>>),
    SoftmaxRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`]. Only leaves (inputs and
/// parameters) keep their gradient; interior buffers are released during the sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    activation_bytes: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by op outputs (inputs and parameter copies excluded).
    pub fn activation_bytes(&self) -> usize {
        self.activation_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if !matches!(op, Op::Input | Op::Param(_)) {
            self.activation_bytes += value.bytes();
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, spec: Conv3dSpec) -> Result<Var> {
        let out = conv3d_forward(self.value(input), self.value(kernel), self.value(bias), spec)?;
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                bias,
                spec,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias of {} values for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone().reshape(&[m, n])?;
        for r in 0..m {
            for (o, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x · w + b` for a batch of row vectors.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ x ⊙ w` for a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(Error::shape("weighted_sum weight size"));
        }
        let s = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w.clone())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x)))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows with no rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index { index: r, classes: m });
            }
            out.extend_from_slice(&self.value(x).data()[r * n..(r + 1) * n]);
        }
        Ok(self.push(Tensor::new(vec![rows.len(), n], out)?, Op::GatherRows(x, rows.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut n_cols = None;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n) = self.value(p).dims2()?;
            if *n_cols.get_or_insert(n) != n {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let n = n_cols.ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.value(p).dims2()?);
        }
        let m = dims.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?.0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &(_, n)) in parts.iter().zip(&dims) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * total + off..r * total + off + n].copy_from_slice(&src[r * n..(r + 1) * n]);
            }
            off += n;
        }
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(Error::shape(format!("column slice {start}..{end} of {n}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(x, start, end)))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn mask_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if factors.len() != m {
            return Err(Error::shape("mask_rows factor count"));
        }
        let mut out = self.value(x).clone();
        for (r, f) in factors.iter().enumerate() {
            for v in &mut out.data_mut()[r * n..(r + 1) * n] {
                *v *= f;
            }
        }
        Ok(self.push(out, Op::MaskRows(x, factors.to_vec())))
    }

    /// Column means of an `m × n` matrix as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x)))
    }

    /// Column-wise maximum over the rows of each group: row `r` of `x`
    /// belongs to group `groups[r]`, and output row `g` holds the maxima of
    /// group `g` (zeros when the group is empty).
    pub fn group_max_rows(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if groups.len() != m {
            return Err(Error::shape(format!("{} group labels for {m} rows", groups.len())));
        }
        if let Some(g) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::shape(format!("group {g} outside 0..{n_groups}")));
        }
        let src = self.value(x).data();
        let mut arg: Vec<Option<usize>> = vec![None; n_groups * n];
        for (r, &g) in groups.iter().enumerate() {
            for c in 0..n {
                let slot = &mut arg[g * n + c];
                if slot.is_none_or(|best| src[r * n + c] > src[best * n + c]) {
                    *slot = Some(r);
                }
            }
        }
        let out = arg
            .iter()
            .enumerate()
            .map(|(i, a)| a.map_or(0.0, |r| src[r * n + i % n]))
            .collect();
        Ok(self.push(Tensor::new(vec![n_groups, n], out)?, Op::GroupMaxRows(x, arg)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let out = softmax_rows_raw(self.value(x).data(), m, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x)))
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::shape(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index { index: bad, classes: k });
        }
        let probs = softmax_rows_raw(self.value(logits).data(), m, k);
        let src = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: Tensor::new(vec![m, k], probs)?,
            },
        ))
    }

    /// Sum of squared differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0).reshape(self.value(loss).shape())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    spec,
                } => {
                    let (gi, gk, gb) = conv3d_backward(self.value(*input), self.value(*kernel), *spec, &g);
                    acc(&mut grads, *input, gi);
                    acc(&mut grads, *kernel, gk);
                    acc(&mut grads, *bias, gb);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *o *= s + v * s * (1.0 - s);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let gv = g.data();
                    // dA = G Bᵀ, dB = Aᵀ G
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gv[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += a_ip * gv[i * n + j];
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(self.value(*a).shape().to_vec(), ga)?);
                    acc(&mut grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                }
                Op::AddBias(x, b) => {
                    let (m, n) = g.dims2()?;
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (o, v) in gb.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, g.reshape(self.value(*x).shape())?);
                    acc(&mut grads, *b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (o, v) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= v;
                    }
                    let mut gb = g;
                    for (o, v) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= v;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, k) => acc(&mut grads, *x, g.map(|v| v * k)),
                Op::Sum(x) => {
                    let gs = g.item();
                    acc(&mut grads, *x, Tensor::full(self.value(*x).shape(), gs));
                }
                Op::WeightedSum(x, w) => {
                    let gs = g.item();
                    acc(&mut grads, *x, w.map(|v| v * gs).reshape(self.value(*x).shape())?);
                }
                Op::Reshape(x) => acc(&mut grads, *x, g.reshape(self.value(*x).shape())?),
                Op::Transpose(x) => {
                    let (m, n) = self.value(*x).dims2()?;
                    let gv = g.data();
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            out[i * n + j] = gv[j * m + i];
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), out)?);
                }
                Op::GatherRows(x, rows) => {
                    let (_, n) = self.value(*x).dims2()?;
                    let mut out = Tensor::zeros(self.value(*x).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g.data()[i * n..(i + 1) * n];
                        for (o, v) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, out);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let piece = g.data()[off..off + len].to_vec();
                        acc(&mut grads, p, Tensor::new(self.value(p).shape().to_vec(), piece)?);
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = g.dims2()?;
                    let mut off = 0;
                    for &p in parts {
                        let (_, n) = self.value(p).dims2()?;
                        let mut piece = Vec::with_capacity(m * n);
                        for r in 0..m {
                            piece.extend_from_slice(&g.data()[r * total + off..r * total + off + n]);
                        }
                        acc(&mut grads, p, Tensor::new(self.value(p).shape().to_vec(), piece)?);
                        off += n;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let (m, n) = self.value(*x).dims2()?;
                    let w = end - start;
                    let mut out = Tensor::zeros(self.value(*x).shape());
                    for r in 0..m {
                        out.data_mut()[r * n + start..r * n + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(&mut grads, *x, out);
                }
                Op::MaskRows(x, factors) => {
                    let (_, n) = self.value(*x).dims2()?;
                    let mut out = g;
                    for (r, f) in factors.iter().enumerate() {
                        for v in &mut out.data_mut()[r * n..(r + 1) * n] {
                            *v *= f;
                        }
                    }
                    acc(&mut grads, *x, out);
                }
                Op::MeanRows(x) => {
                    let (m, n) = self.value(*x).dims2()?;
                    let mut out = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        out.extend(g.data().iter().map(|v| v / m as f64));
                    }
                    acc(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), out)?);
                }
                Op::GroupMaxRows(x, arg) => {
                    let n = node.value.dims2()?.1;
                    let mut out = Tensor::zeros(self.value(*x).shape());
                    let dst = out.data_mut();
                    for (i, a) in arg.iter().enumerate() {
                        if let Some(r) = a {
                            dst[r * n + i % n] += g.data()[i];
                        }
                    }
                    acc(&mut grads, *x, out);
                }
                Op::SoftmaxRows(x) => {
                    let (m, n) = node.value.dims2()?;
                    let y = node.value.data();
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), out)?);
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let gs = g.item();
                    let (_, k) = probs.dims2()?;
                    let mut out = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        out.data_mut()[r * k + t] -= 1.0;
                    }
                    out.scale_assign(gs);
                    acc(&mut grads, *logits, out.reshape(self.value(*logits).shape())?);
                }
                Op::Mse(p, t) => {
                    let gs = g.item();
                    let mut gp = self.value(*p).clone();
                    for (o, v) in gp.data_mut().iter_mut().zip(self.value(*t).data()) {
                        *o = 2.0 * (*o - v) * gs;
                    }
                    let gt = gp.map(|v| -v);
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *t, gt);
                }
            }
        }
        Ok(Grads { grads })
    }

    /// Runs `backward` and adds `scale ×` each parameter gradient to `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore, scale: f64) -> Result<()> {
        let grads = self.backward_raw(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, &g, scale);
            }
        }
        Ok(())
    }

    fn backward_raw(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        Ok(self.backward(loss)?.grads)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, bv) in dst.iter_mut().zip(row) {
                *d += a_ip * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &x[r * n..(r + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[r * n + j] = e;
            z += e;
        }
        for v in &mut out[r * n..(r + 1) * n] {
            *v /= z;
        }
    }
    out
}

fn conv_out_dim(extent: usize, k: usize, stride: usize, pad: usize, axis: Axis) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Dimension {
            axis,
            detail: "stride must be positive".into(),
        });
    }
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::Dimension {
            axis,
            detail: format!("kernel extent {k} exceeds padded input extent {padded}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeom {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    ot: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, spec: Conv3dSpec) -> Result<ConvGeom> {
    let [ci, t, h, w] = input.shape() else {
        return Err(Error::shape(format!(
            "conv3d input must be C×T×H×W, got {:?}",
            input.shape()
        )));
    };
    let [co, kci, kt, kh, kw] = kernel.shape() else {
        return Err(Error::shape(format!(
            "conv3d kernel must be Cout×Cin×kt×kh×kw, got {:?}",
            kernel.shape()
        )));
    };
    if kci != ci {
        return Err(Error::Dimension {
            axis: Axis::Channel,
            detail: format!("kernel expects {kci} input channels, input has {ci}"),
        });
    }
    let ot = conv_out_dim(*t, *kt, spec.stride[0], spec.padding[0], Axis::Temporal)?;
    let oh = conv_out_dim(*h, *kh, spec.stride[1], spec.padding[1], Axis::Height)?;
    let ow = conv_out_dim(*w, *kw, spec.stride[2], spec.padding[2], Axis::Width)?;
    Ok(ConvGeom {
        ci: *ci,
        t: *t,
        h: *h,
        w: *w,
        co: *co,
        kt: *kt,
        kh: *kh,
        kw: *kw,
        ot,
        oh,
        ow,
    })
}

/// Visits every (output voxel, kernel tap) pair that lands inside the input.
/// `f(out_index, in_index, kernel_index)`; channel loops are the caller's.
#[inline]
fn for_each_tap(g: &ConvGeom, spec: Conv3dSpec, mut f: impl FnMut(usize, usize, usize)) {
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.padding;
    for ot in 0..g.ot {
        for a in 0..g.kt {
            let it = (ot * st + a) as isize - pt as isize;
            if it < 0 || it >= g.t as isize {
                continue;
            }
            for oh in 0..g.oh {
                for b in 0..g.kh {
                    let ih = (oh * sh + b) as isize - ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for ow in 0..g.ow {
                        for c in 0..g.kw {
                            let iw = (ow * sw + c) as isize - pw as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let o = (ot * g.oh + oh) * g.ow + ow;
                            let i = ((it as usize) * g.h + ih as usize) * g.w + iw as usize;
                            let k = (a * g.kh + b) * g.kw + c;
                            f(o, i, k);
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) over a single C×T×H×W volume.
pub fn conv3d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, spec: Conv3dSpec) -> Result<Tensor> {
    let g = conv_geom(input, kernel, spec)?;
    if bias.len() != g.co {
        return Err(Error::Dimension {
            axis: Axis::Channel,
            detail: format!("bias has {} entries for {} output channels", bias.len(), g.co),
        });
    }
    let in_vol = g.t * g.h * g.w;
    let out_vol = g.ot * g.oh * g.ow;
    let k_vol = g.kt * g.kh * g.kw;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.co * out_vol];
    for co in 0..g.co {
        let dst = &mut out[co * out_vol..(co + 1) * out_vol];
        dst.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..g.ci {
            let xs = &x[ci * in_vol..(ci + 1) * in_vol];
            let ks = &k[(co * g.ci + ci) * k_vol..(co * g.ci + ci + 1) * k_vol];
            for_each_tap(&g, spec, |o, i, kk| dst[o] += xs[i] * ks[kk]);
        }
    }
    Tensor::new(vec![g.co, g.ot, g.oh, g.ow], out)
}

fn conv3d_backward(input: &Tensor, kernel: &Tensor, spec: Conv3dSpec, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let g = conv_geom(input, kernel, spec).expect("geometry validated in forward");
    let in_vol = g.t * g.h * g.w;
    let out_vol = g.ot * g.oh * g.ow;
    let k_vol = g.kt * g.kh * g.kw;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gi = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.co];
    for co in 0..g.co {
        let gos = &go[co * out_vol..(co + 1) * out_vol];
        gb[co] = gos.iter().sum();
        for ci in 0..g.ci {
            let xs = &x[ci * in_vol..(ci + 1) * in_vol];
            let kidx = (co * g.ci + ci) * k_vol;
            let ks = &k[kidx..kidx + k_vol];
            let gks = &mut gk[kidx..kidx + k_vol];
            let gis = &mut gi[ci * in_vol..(ci + 1) * in_vol];
            for_each_tap(&g, spec, |o, i, kk| {
                gks[kk] += gos[o] * xs[i];
                gis[i] += gos[o] * ks[kk];
            });
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).unwrap(),
        Tensor::new(kernel.shape().to_vec(), gk).unwrap(),
        Tensor::new(vec![g.co], gb).unwrap(),
    )
}
