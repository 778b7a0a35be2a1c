//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse from a scalar loss. Leaf gradients persist across
//! `backward` calls and accumulate until [`Graph::zero_grad`].

use super::tensor::{mm, mm_nt, mm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogClamped(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    LogSumExp(Var),
    Select(Var, usize),
    PairwiseLogistic(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// `log(1 + e^x)`, overflow-safe for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(2u)` with `u = c·(x + a·x³)`, which equals `(1 + tanh u) / 2`.
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// Records a leaf. It receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t.detached(), Op::Leaf, needs)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.detached();
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]^T")));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), needs))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(bias).numel() != n {
            return Err(Error::Shape(format!(
                "row bias of {} values for [{m},{n}]",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, bias), needs))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| f(*x)).collect();
        let shape = t.shape().to_vec();
        let needs = self.ng(a);
        let value = Tensor::new(shape, out).expect("map preserves shape");
        self.push(value, op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::LogClamped(a, floor))
    }

    /// Row-wise layer normalization of an `[m, n]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Shape(format!("layer norm affine params for width {n}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(vec![m, n], out)?, op, needs))
    }

    /// Softmax over the last axis of an `[m, n]` matrix. Entries whose mask
    /// is `false` get weight exactly zero; a fully masked row yields zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if mask.len() != m * n {
            return Err(Error::Shape(format!(
                "mask of {} entries for [{m},{n}] scores",
                mask.len()
            )));
        }
        let xs = self.value(a).data();
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain("attention scores are not finite".into()));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &keep)| keep)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for c in 0..n {
                if mrow[c] {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            orow.iter_mut().for_each(|x| *x /= sum);
        }
        let needs = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MaskedSoftmax(a),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start + len > m {
            return Err(Error::Shape(format!("rows {start}..{} of {m}", start + len)));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows(a, start), needs))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start + len > n {
            return Err(Error::Shape(format!("cols {start}..{} of {n}", start + len)));
        }
        let xs = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xs[r * n + start..r * n + start + len]);
        }
        let needs = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols(a, start), needs))
    }

    /// Selects rows by index (repeats allowed). Also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let xs = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Shape(format!("row index {i} out of {m}")));
            }
            out.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let needs = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows(a, idx.to_vec()),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0])?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(Error::Shape(format!("concat_rows width {pn} vs {n}")));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::Shape(format!("concat_cols height {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).detached().reshaped(shape)?;
        let needs = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// `ln Σ exp(x)` over all entries, max-shifted.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let xs = self.value(a).data();
        if xs.is_empty() {
            return Err(Error::Shape("log-sum-exp of an empty tensor".into()));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain("log-sum-exp input is not finite".into()));
        }
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
        let needs = self.ng(a);
        Ok(self.push(Tensor::scalar(max + s.ln()), Op::LogSumExp(a), needs))
    }

    /// Picks one entry (flat index) as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let xs = self.value(a).data();
        let v = *xs
            .get(index)
            .ok_or_else(|| Error::Shape(format!("index {index} of {} entries", xs.len())))?;
        let needs = self.ng(a);
        Ok(self.push(Tensor::scalar(v), Op::Select(a, index), needs))
    }

    /// `Σ_(i,j) softplus(s_i - s_j)` over the listed pairs, summed in list order.
    pub fn pairwise_logistic(&mut self, s: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let xs = self.value(s).data();
        let mut total = 0.0;
        for &(i, j) in &pairs {
            if i >= xs.len() || j >= xs.len() {
                return Err(Error::Shape(format!("pair ({i},{j}) of {} scores", xs.len())));
            }
            total += softplus(xs[i] - xs[j]);
        }
        let needs = self.ng(s);
        Ok(self.push(Tensor::scalar(total), Op::PairwiseLogistic(s, pairs), needs))
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.leaf_grads[idx].get_or_insert_with(|| vec![0.0; gy.len()]);
                for (a, g) in acc.iter_mut().zip(&gy) {
                    *a += g;
                }
                continue;
            }
            self.propagate(idx, &gy, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let y = &nodes[idx].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                if wants(*a) {
                    let da = mm_nt(gy, val(*b).data(), m, n, k);
                    acc(*a, &mut |g| add_into(g, &da));
                }
                let av = val(*a).data();
                acc(*b, &mut |g| mm_tn_acc(av, gy, m, k, n, g));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.0;
                if wants(*a) {
                    let da = mm(gy, val(*b).data(), m, n, k);
                    acc(*a, &mut |g| add_into(g, &da));
                }
                let av = val(*a).data();
                acc(*b, &mut |g| mm_tn_acc(gy, av, m, n, k, g));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*bias, &mut |g| {
                    let n = g.len();
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(x, d)| *x += c * d)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gy)),
            Op::Gelu(a) => {
                let xs = val(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * gelu_grad(xs[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let ys = y.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * (1.0 - ys[i] * ys[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let ys = y.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * ys[i] * (1.0 - ys[i]);
                    }
                });
            }
            Op::LogClamped(a, floor) => {
                let xs = val(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if xs[i] > *floor {
                            g[i] += gy[i] / xs[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = val(*x).dims2()?;
                let gv = val(*gamma).data();
                acc(*gamma, &mut |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += gy[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                });
                acc(*x, &mut |g| {
                    let nf = n as f64;
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = gy[r * n + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for c in 0..n {
                            let d = gy[r * n + c] * gv[c];
                            g[r * n + c] += rstd[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let (m, n) = y.dims2()?;
                let ys = y.data();
                acc(*a, &mut |g| {
                    for r in 0..m {
                        let yr = &ys[r * n..(r + 1) * n];
                        let gr = &gy[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for c in 0..n {
                            g[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = y.dims2()?.1;
                acc(*a, &mut |g| add_into(&mut g[start * n..start * n + gy.len()], gy));
            }
            Op::SliceCols(a, start) => {
                let (m, len) = y.dims2()?;
                let n = val(*a).dims2()?.1;
                acc(*a, &mut |g| {
                    for r in 0..m {
                        add_into(
                            &mut g[r * n + start..r * n + start + len],
                            &gy[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::GatherRows(a, idx_list) => {
                let n = y.dims2()?.1;
                acc(*a, &mut |g| {
                    for (r, &i) in idx_list.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &gy[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = y.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let w = val(p).dims2()?.1;
                    acc(p, &mut |g| {
                        for r in 0..m {
                            add_into(&mut g[r * w..(r + 1) * w], &gy[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += gy[0])),
            Op::LogSumExp(a) => {
                let xs = val(*a).data();
                let lse = y.item();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[0] * (xs[i] - lse).exp();
                    }
                });
            }
            Op::Select(a, i) => acc(*a, &mut |g| g[*i] += gy[0]),
            Op::PairwiseLogistic(s, pairs) => {
                let xs = val(*s).data();
                acc(*s, &mut |g| {
                    for &(i, j) in pairs {
                        let d = gy[0] * sigmoid(xs[i] - xs[j]);
                        g[i] += d;
                        g[j] -= d;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √head_dim) V` with a boolean
/// key mask shaped like the score matrix (`true` = attend).
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
    head_dim: usize,
) -> Result<Var> {
    if head_dim == 0 {
        return Err(Error::Shape("head_dim must be positive".into()));
    }
    let (nk, _) = g.value(k).dims2()?;
    let (nv, _) = g.value(v).dims2()?;
    if nk != nv {
        return Err(Error::Shape(format!("{nk} keys but {nv} values")));
    }
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = g.masked_softmax(scaled, mask)?;
    g.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let p = g.leaf(&Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap().with_grad());
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_grad_is_two_p() {
        let mut g = Graph::new();
        let data = vec![0.5, -1.5, 2.0];
        let p = g.leaf(&Tensor::vector(data.clone()).with_grad());
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expect: Vec<f64> = data.iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.grad(p).unwrap(), expect.as_slice());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let p = g.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        let s = g.sum(p);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(p).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let p = g.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = g.leaf(&Tensor::vector(vec![3.0, 4.0]).with_grad());
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![5.0, 1.0, 1.0]).unwrap());
        let y = g.masked_softmax(x, &[false, true, true]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn attention_singleton_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let k = g.constant(Tensor::matrix(1, 2, vec![1.1, 0.2]).unwrap());
        let v = g.constant(Tensor::matrix(1, 3, vec![4.0, 5.0, 6.0]).unwrap());
        let out = attention(&mut g, q, k, v, &[true], 2).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let k = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap());
        let out = attention(&mut g, q, k, v, &[true, true], 2).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 2.0]);
    }

    #[test]
    fn attention_shape_errors() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![0.0; 2]).unwrap());
        let k = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let v = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(
            attention(&mut g, q, k, v, &[true, true], 2),
            Err(Error::Shape(_))
        ));
        let k = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(
            attention(&mut g, q, k, v, &[true], 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
