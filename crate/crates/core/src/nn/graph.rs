//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its value; [`Graph::backward`] walks
//! the tape in reverse and accumulates adjoints. Convolutions use the
//! cross-correlation convention on `NCHW` tensors.

use super::params::{Gradients, ParamId, ParameterStore};
use super::tensor::{gemm, Tensor, Window};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;
pub const RELU_CLIP: f64 = 0.1;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Param(ParamId),
    Dense { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Gaussian { x: Var, a: f64 },
    GaussianRadial { x: Var, a: f64 },
    ClippedRelu(Var),
    Sigmoid(Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, weights: [f64; 2], probs: Vec<f64> },
    Conv { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Var, stride: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, frozen: bool },
    Concat(Var, Var),
    Mse { pred: Var, target: Vec<f64> },
    Dot { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Running-statistics update requested by a batch-norm node in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    pub mode: Mode,
    pub buffer_updates: Vec<BufferUpdate>,
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, buffer_updates: Vec::new() }
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    fn is_constant(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Constant)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Param(id), grad: None });
        Var(self.nodes.len() - 1)
    }

    /// `y = x Wᵀ + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (&self.value(x).shape, &self.value(w).shape, &self.value(b).shape);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs[..] != [ws[0]] {
            return Err(Error::shape(format!("dense: x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(&self.value(b).data);
        }
        gemm(batch, inp, out, &self.value(x).data, false, &self.value(w).data, true, 1.0, &mut y);
        self.push(Tensor { shape: vec![batch, out], data: y }, Op::Dense { x, w, b }, "dense")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::shape("add: operand shapes differ"));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        self.push(Tensor { shape: self.value(a).shape.clone(), data }, Op::Add(a, b), "add")
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let t = self.value(x);
        let data = t.data.iter().map(|v| f(*v)).collect();
        self.push(Tensor { shape: t.shape.clone(), data }, op, name)
    }

    /// Elementwise `exp(−z²/(2a²))`.
    pub fn gaussian(&mut self, x: Var, a: f64) -> Result<Var> {
        if !(a > 0.0) {
            return Err(Error::invalid(format!("gaussian bandwidth {a} must be positive")));
        }
        let s = 0.5 / (a * a);
        self.map(x, |z| (-s * z * z).exp(), Op::Gaussian { x, a }, "gaussian")
    }

    /// Row-wise `exp(−‖z‖²/(2a²))` broadcast over the row, for `[B, F]` input.
    pub fn gaussian_radial(&mut self, x: Var, a: f64) -> Result<Var> {
        if !(a > 0.0) {
            return Err(Error::invalid(format!("gaussian bandwidth {a} must be positive")));
        }
        let t = self.value(x);
        let [_, f] = t.shape[..] else { return Err(Error::shape("radial gaussian expects [B, F]")) };
        let s = 0.5 / (a * a);
        let data = t.data.chunks(f).flat_map(|row| std::iter::repeat_n((-s * row.iter().map(|v| v * v).sum::<f64>()).exp(), f)).collect();
        self.push(Tensor { shape: t.shape.clone(), data }, Op::GaussianRadial { x, a }, "radial gaussian")
    }

    /// `min(max(0, z), 0.1)`.
    pub fn clipped_relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |z| z.clamp(0.0, RELU_CLIP), Op::ClippedRelu(x), "clipped relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    /// Mean weighted cross-entropy of two-class logits `[B, 2]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], weights: [f64; 2]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape.len() != 2 || t.shape[1] != 2 || t.shape[0] != labels.len() {
            return Err(Error::shape(format!("softmax_xent: logits {:?} for {} labels", t.shape, labels.len())));
        }
        if labels.iter().any(|l| *l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut loss = 0.0;
        for (row, &l) in t.data.chunks(2).zip(labels) {
            let (p, lse) = softmax2(row[0], row[1]);
            probs.extend_from_slice(&p);
            loss += weights[l] * (lse - row[l]);
        }
        loss /= labels.len() as f64;
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), weights, probs };
        self.push(Tensor::scalar(loss), op, "softmax cross-entropy")
    }

    /// 2D convolution of `x: [B, C, H, W]` with `w: [Co, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c, h, wd) = self.value(x).nchw()?;
        let (co, ci, k, k2) = self.value(w).nchw()?;
        if ci != c || k != k2 || self.value(b).shape[..] != [co] || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!("conv2d: x {:?}, w {:?}", self.value(x).shape, self.value(w).shape)));
        }
        let win = Window { channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (ho, wo) = (win.out_height(), win.out_width());
        let (rows, cols) = (c * k * k, ho * wo);
        let mut col = vec![0.0; rows * cols];
        let mut y = vec![0.0; batch * co * cols];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        for n in 0..batch {
            win.im2col(&xv[n * c * h * wd..(n + 1) * c * h * wd], &mut col);
            let out = &mut y[n * co * cols..(n + 1) * co * cols];
            for (o, bias) in bv.iter().enumerate() {
                out[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v = *bias);
            }
            gemm(co, rows, cols, wv, false, &col, false, 1.0, out);
        }
        self.push(Tensor { shape: vec![batch, co, ho, wo], data: y }, Op::Conv { x, w, b, stride, pad }, "conv2d")
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] without
    /// padding: `x: [B, Ci, H, W]`, `w: [Ci, Co, k, k]`, output
    /// `[B, Co, (H−1)s + k, (W−1)s + k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (batch, ci, h, wd) = self.value(x).nchw()?;
        let (wci, co, k, k2) = self.value(w).nchw()?;
        if wci != ci || k != k2 || self.value(b).shape[..] != [co] || stride == 0 {
            return Err(Error::shape(format!("conv_transpose2d: x {:?}, w {:?}", self.value(x).shape, self.value(w).shape)));
        }
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let win = Window { channels: co, height: ho, width: wo, kernel: k, stride, pad: 0 };
        let (rows, cols) = (co * k * k, h * wd);
        let mut col = vec![0.0; rows * cols];
        let mut y = vec![0.0; batch * co * ho * wo];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        for n in 0..batch {
            gemm(rows, ci, cols, wv, true, &xv[n * ci * cols..(n + 1) * ci * cols], false, 0.0, &mut col);
            let out = &mut y[n * co * ho * wo..(n + 1) * co * ho * wo];
            for (o, bias) in bv.iter().enumerate() {
                out[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v = *bias);
            }
            win.col2im(&col, out);
        }
        self.push(Tensor { shape: vec![batch, co, ho, wo], data: y }, Op::ConvT { x, w, b, stride }, "conv_transpose2d")
    }

    /// Non-overlapping 2×2 max pooling; even spatial sizes required.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2 needs even sizes, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let mut y = Vec::with_capacity(batch * c * ho * wo);
        let mut argmax = Vec::with_capacity(batch * c * ho * wo);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for idx in [base + 2 * i * w + 2 * j + 1, base + (2 * i + 1) * w + 2 * j, base + (2 * i + 1) * w + 2 * j + 1] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor { shape: vec![batch, c, ho, wo], data: y }, Op::MaxPool { x, argmax }, "maxpool2")
    }

    /// Per-channel batch normalization of `[B, C, H, W]` over batch and
    /// space. Train mode normalizes with batch statistics and queues an
    /// update of the running statistics; eval mode uses the running ones.
    pub fn batchnorm(&mut self, store: &ParameterStore, x: Var, gamma: Var, beta: Var, running_mean: ParamId, running_var: ParamId) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).nchw()?;
        if self.value(gamma).shape[..] != [c] || self.value(beta).shape[..] != [c] {
            return Err(Error::shape("batchnorm: scale and shift must have one entry per channel"));
        }
        let hw = h * w;
        let count = (batch * hw) as f64;
        let xv = &self.nodes[x.0].value.data;
        let mut pending = Vec::new();
        let (mean, var) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for n in 0..batch {
                    for ch in 0..c {
                        mean[ch] += xv[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for n in 0..batch {
                    for ch in 0..c {
                        var[ch] += xv[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let rm = &store.get(running_mean).data;
                let rv = &store.get(running_var).data;
                let blend = |r: &[f64], b: &[f64]| r.iter().zip(b).map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b).collect();
                pending.push(BufferUpdate { id: running_mean, value: Tensor { shape: vec![c], data: blend(rm, &mean) } });
                pending.push(BufferUpdate { id: running_var, value: Tensor { shape: vec![c], data: blend(rv, &var) } });
                (mean, var)
            }
            Mode::Eval => (store.get(running_mean).data.clone(), store.get(running_var).data.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for n in 0..batch {
            for ch in 0..c {
                let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                for k in r {
                    xhat[k] = (xv[k] - mean[ch]) * inv_std[ch];
                    y[k] = g[ch] * xhat[k] + bt[ch];
                }
            }
        }
        let frozen = self.mode == Mode::Eval;
        self.buffer_updates.extend(pending);
        let shape = self.value(x).shape.clone();
        self.push(Tensor { shape, data: y }, Op::BatchNorm { x, gamma, beta, xhat, inv_std, frozen }, "batchnorm")
    }

    /// Channel-wise concatenation of two `NCHW` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).nchw()?;
        let (nb, cb, hb, wb) = self.value(b).nchw()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape("concat: batch or spatial sizes differ"));
        }
        let hw = ha * wa;
        let mut y = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            y.extend_from_slice(&self.value(a).data[n * ca * hw..(n + 1) * ca * hw]);
            y.extend_from_slice(&self.value(b).data[n * cb * hw..(n + 1) * cb * hw]);
        }
        self.push(Tensor { shape: vec![na, ca + cb, ha, wa], data: y }, Op::Concat(a, b), "concat")
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = &self.value(pred).data;
        if p.len() != target.len() {
            return Err(Error::shape(format!("mse: {} predictions for {} targets", p.len(), target.len())));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() }, "mse")
    }

    /// `Σ wᵢ xᵢ`; a linear probe used by gradient checks.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(Error::shape("dot: length mismatch"));
        }
        let v = self.value(x).data.iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(v), Op::Dot { x, weights: weights.to_vec() }, "dot")
    }

    /// Seeds `d loss = 1` and propagates adjoints to every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_backward(i, &gy)?;
            self.nodes[i].grad = Some(gy);
            for (v, g) in contributions {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("backward pass".into()));
                }
                add_into(&mut self.nodes[v.0].grad, &g);
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, gy: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Constant | Op::Param(_) => Vec::new(),
            Op::Dense { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (batch, inp, out) = (xt.shape[0], xt.shape[1], wt.shape[0]);
                let mut res = Vec::with_capacity(3);
                if !self.is_constant(*x) {
                    let mut gx = vec![0.0; batch * inp];
                    gemm(batch, out, inp, gy, false, &wt.data, false, 0.0, &mut gx);
                    res.push((*x, gx));
                }
                let mut gw = vec![0.0; out * inp];
                gemm(out, batch, inp, gy, true, &xt.data, false, 0.0, &mut gw);
                let mut gb = vec![0.0; out];
                for row in gy.chunks(out) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                res.extend([(*w, gw), (*b, gb)]);
                res
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Gaussian { x, a } => {
                let xv = &self.value(*x).data;
                let s = 1.0 / (a * a);
                vec![(*x, gy.iter().zip(xv).zip(&y.data).map(|((g, z), v)| -g * v * z * s).collect())]
            }
            Op::GaussianRadial { x, a } => {
                let xv = &self.value(*x).data;
                let f = y.shape[1];
                let s = 1.0 / (a * a);
                let mut gx = vec![0.0; xv.len()];
                for ((grow, xrow), (yrow, out)) in gy.chunks(f).zip(xv.chunks(f)).zip(y.data.chunks(f).zip(gx.chunks_mut(f))) {
                    let gsum: f64 = grow.iter().sum();
                    for (o, z) in out.iter_mut().zip(xrow) {
                        *o = -gsum * yrow[0] * z * s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ClippedRelu(x) => {
                let xv = &self.value(*x).data;
                vec![(*x, gy.iter().zip(xv).map(|(g, z)| if *z > 0.0 && *z < RELU_CLIP { *g } else { 0.0 }).collect())]
            }
            Op::Sigmoid(x) => vec![(*x, gy.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect())],
            Op::SoftmaxXent { logits, labels, weights, probs } => {
                let scale = gy[0] / labels.len() as f64;
                let mut g = vec![0.0; probs.len()];
                for (r, &l) in labels.iter().enumerate() {
                    for c in 0..2 {
                        let onehot = if c == l { 1.0 } else { 0.0 };
                        g[2 * r + c] = scale * weights[l] * (probs[2 * r + c] - onehot);
                    }
                }
                vec![(*logits, g)]
            }
            Op::Conv { x, w, b, stride, pad } => {
                let (batch, c, h, wd) = self.value(*x).nchw()?;
                let (co, _, k, _) = self.value(*w).nchw()?;
                let win = Window { channels: c, height: h, width: wd, kernel: k, stride: *stride, pad: *pad };
                let (rows, cols) = (c * k * k, win.out_height() * win.out_width());
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                let mut col = vec![0.0; rows * cols];
                let mut dcol = vec![0.0; rows * cols];
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; co];
                let want_x = !self.is_constant(*x);
                for n in 0..batch {
                    let go = &gy[n * co * cols..(n + 1) * co * cols];
                    win.im2col(&xv[n * c * h * wd..(n + 1) * c * h * wd], &mut col);
                    gemm(co, cols, rows, go, false, &col, true, 1.0, &mut gw);
                    if want_x {
                        gemm(rows, co, cols, wv, true, go, false, 0.0, &mut dcol);
                        win.col2im(&dcol, &mut gx[n * c * h * wd..(n + 1) * c * h * wd]);
                    }
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += go[o * cols..(o + 1) * cols].iter().sum::<f64>();
                    }
                }
                if want_x { vec![(*x, gx), (*w, gw), (*b, gb)] } else { vec![(*w, gw), (*b, gb)] }
            }
            Op::ConvT { x, w, b, stride } => {
                let (batch, ci, h, wd) = self.value(*x).nchw()?;
                let (_, co, k, _) = self.value(*w).nchw()?;
                let (_, _, ho, wo) = y.nchw()?;
                let win = Window { channels: co, height: ho, width: wo, kernel: k, stride: *stride, pad: 0 };
                let (rows, cols) = (co * k * k, h * wd);
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                let mut col = vec![0.0; rows * cols];
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; co];
                for n in 0..batch {
                    let go = &gy[n * co * ho * wo..(n + 1) * co * ho * wo];
                    win.im2col(go, &mut col);
                    gemm(ci, rows, cols, wv, false, &col, false, 0.0, &mut gx[n * ci * cols..(n + 1) * ci * cols]);
                    gemm(ci, cols, rows, &xv[n * ci * cols..(n + 1) * ci * cols], false, &col, true, 1.0, &mut gw);
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += go[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (g, &k) in gy.iter().zip(argmax) {
                    gx[k] += g;
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, frozen } => {
                let (batch, c, h, w) = self.value(*x).nchw()?;
                let hw = h * w;
                let count = (batch * hw) as f64;
                let g = &self.value(*gamma).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for n in 0..batch {
                    for ch in 0..c {
                        for k in (n * c + ch) * hw..(n * c + ch + 1) * hw {
                            dgamma[ch] += gy[k] * xhat[k];
                            dbeta[ch] += gy[k];
                        }
                    }
                }
                let mut gx = vec![0.0; gy.len()];
                for n in 0..batch {
                    for ch in 0..c {
                        for k in (n * c + ch) * hw..(n * c + ch + 1) * hw {
                            gx[k] = if *frozen {
                                g[ch] * inv_std[ch] * gy[k]
                            } else {
                                g[ch] * inv_std[ch] / count * (count * gy[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                            };
                        }
                    }
                }
                vec![(*x, gx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).nchw()?;
                let cb = self.value(*b).shape[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for k in 0..n {
                    let base = k * (ca + cb) * hw;
                    ga.extend_from_slice(&gy[base..base + ca * hw]);
                    gb.extend_from_slice(&gy[base + ca * hw..base + (ca + cb) * hw]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mse { pred, target } => {
                let p = &self.value(*pred).data;
                let s = 2.0 * gy[0] / p.len() as f64;
                vec![(*pred, p.iter().zip(target).map(|(a, b)| s * (a - b)).collect())]
            }
            Op::Dot { x, weights } => vec![(*x, weights.iter().map(|w| w * gy[0]).collect())],
        })
    }

    /// Gradients of every parameter leaf, summed per parameter.
    pub fn param_grads(&self, store: &ParameterStore) -> Gradients {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for n in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&n.op, &n.grad) {
                add_into(&mut out[id.0], g);
            }
        }
        Gradients(out)
    }

    /// Applies queued running-statistics updates.
    pub fn commit_buffers(&mut self, store: &mut ParameterStore) {
        for u in self.buffer_updates.drain(..) {
            *store.get_mut(u.id) = u.value;
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probabilities and log-sum-exp of two logits.
pub fn softmax2(a: f64, b: f64) -> ([f64; 2], f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    let pa = ea / s;
    ([pa, 1.0 - pa], m + s.ln())
}
