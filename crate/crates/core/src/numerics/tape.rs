//! Dynamic reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents. Nodes are created in topological order, so `backward` is a
//! single reverse sweep over the node list.

use crate::error::{Error, Result};

use super::tensor::{matmul_nt, matmul_tn, Tensor};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MaskRows(Var, Vec<bool>),
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`. Present for
    /// every node that requires a gradient once `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[..×n] + bias[n]`, broadcasting the bias over every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.numel() != n {
            return Err(Error::Dimension(format!(
                "bias of shape {:?} does not match rows of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v * k).collect());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if indices.is_empty() {
            return Err(Error::Dimension("selecting zero rows".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Dimension(format!("row {i} out of range for {:?}", tx.shape())));
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::from_parts(vec![indices.len(), c], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SelectRows(x, indices.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.dims2()?.1 != c {
                return Err(Error::Dimension(format!("concat_rows width mismatch at {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if width == 0 || start + width > c {
            return Err(Error::Dimension(format!("columns {start}..{} of {:?}", start + width, tx.shape())));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + width]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![r, width], data), Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::Dimension("concat_cols row count mismatch".into()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts(vec![r, total], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Replaces every row whose `keep` flag is false with exact `+0.0`.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if keep.len() != r {
            return Err(Error::Dimension(format!("mask of length {} for {r} rows", keep.len())));
        }
        let mut data = tx.data().to_vec();
        for (row, &k) in data.chunks_mut(c).zip(keep) {
            if !k {
                row.fill(0.0);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::MaskRows(x, keep.to_vec()), rg))
    }

    /// Softmax over the last axis, stabilized by max subtraction. With
    /// `causal`, row `i` of a matrix only sees columns `0..=i`; the rest get
    /// probability exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let tx = self.value(x);
        if causal {
            tx.dims2()?;
        }
        let out = softmax_rows(tx, causal);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::Dimension(format!(
                "layer_norm affine of {:?}/{:?} for {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        for i in 0..rows {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    /// Rows whose target is `None` are excluded from both sum and count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, k) = tl.dims2()?;
        if targets.len() != rows {
            return Err(Error::Dimension(format!("{} targets for {rows} logit rows", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross-entropy over zero non-padding targets".into()));
        }
        let probs = softmax_rows(tl, false).into_data();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= k {
                return Err(Error::Vocabulary { id: t, size: k });
            }
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Populates `grad` on every node that requires one, with `∂loss/∂node`.
    /// Nodes that require a gradient but are unreachable from `loss` receive
    /// zeros. Any gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            node.grad = if node.requires_grad {
                let shape = node.value.shape().to_vec();
                match grads.get_mut(idx).and_then(Option::take) {
                    Some(g) => Some(Tensor::from_parts(shape, g)),
                    None => Some(Tensor::zeros(&shape)),
                }
            } else {
                None
            };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    send(*a, matmul_nt(g, tb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
            }
            Op::AddRowBias(x, bias) => {
                send(*x, g.to_vec());
                let n = out.last_dim();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                send(*bias, gb);
            }
            Op::Scale(x, k) => send(*x, g.iter().map(|v| v * k).collect()),
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                send(*x, gx);
            }
            Op::SelectRows(x, indices) => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut gx = vec![0.0; tx.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    gx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(a, v)| *a += v);
                }
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let w = out.shape()[1];
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    send(p, gp);
                    offset += w;
                }
            }
            Op::MaskRows(x, keep) => {
                let c = out.last_dim();
                let mut gx = g.to_vec();
                for (row, &k) in gx.chunks_mut(c).zip(keep) {
                    if !k {
                        row.fill(0.0);
                    }
                }
                send(*x, gx);
            }
            Op::Softmax { x, .. } => {
                let n = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((y, gy), gxr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] = y[j] * (gy[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = out.last_dim();
                let tg = self.value(*gain).data();
                let mut gg = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for (i, is) in inv_std.iter().enumerate() {
                    let gy = &g[i * c..(i + 1) * c];
                    let h = &xhat[i * c..(i + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        gg[j] += gy[j] * h[j];
                        gbias[j] += gy[j];
                        let d = gy[j] * tg[j];
                        mean_d += d;
                        mean_dh += d * h[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        let d = gy[j] * tg[j];
                        gx[i * c + j] = is * (d - mean_d - h[j] * mean_dh);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gbias);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let gx = tx
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gy)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gy * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                send(*x, gx);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let k = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..k {
                        gl[i * k + j] = probs[i * k + j] * scale;
                    }
                    gl[i * k + t] -= scale;
                }
                send(*logits, gl);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
        }
    }
}

/// Row-wise softmax over the last axis. With `causal`, entries above the
/// diagonal are skipped entirely and left at exactly zero.
pub(crate) fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let n = x.last_dim();
    let mut data = vec![0.0; x.numel()];
    for (i, (row, o)) in x.data().chunks(n).zip(data.chunks_mut(n)).enumerate() {
        let visible = if causal { (i + 1).min(n) } else { n };
        let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            o[j] = e;
            total += e;
        }
        for v in &mut o[..visible] {
            *v /= total;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}
