//! Operation tape: forward recording and reverse-mode gradient sweep.

use alloc::vec;
use alloc::vec::Vec;

use super::{shape_string, Tensor};
use crate::math;
use crate::{CoreError, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded primitive. Saved fields are whatever backward needs.
#[derive(Debug, Clone)]
enum Op {
    Conv2d { input: Var, kernel: Var, out: Var, stride: usize, padding: usize },
    BiasChannel { input: Var, bias: Var, out: Var },
    MaxPool2d { input: Var, out: Var, argmax: Vec<usize> },
    Upsample2d { input: Var, out: Var, factor: usize },
    Dense { input: Var, weight: Var, bias: Var, out: Var },
    Relu { input: Var, out: Var },
    Sigmoid { input: Var, out: Var },
    Tanh { input: Var, out: Var },
    Softmax { input: Var, out: Var },
    CrossEntropy { logits: Var, label: usize, out: Var },
    MseScalar { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Affine { input: Var, mul: f64, out: Var },
    Sum { input: Var, out: Var },
    SumSquares { input: Var, out: Var },
    LogitDiff { logits: Var, pos: usize, neg: usize, out: Var },
    CwMargin { logits: Var, target: usize, confidence: f64, out: Var },
    Reshape { input: Var, out: Var },
}

/// Records primitives in execution order; [`Tape::backward`] traverses them
/// once in reverse. Confined to one logical thread; independent evaluations
/// use independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Put a tensor on the tape. Its `requires_grad` flag decides whether
    /// `backward` will fill its gradient.
    pub fn var(&mut self, tensor: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(tensor);
        Var(id)
    }

    /// Convenience: a constant (non-differentiated) tensor.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.var(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data()
    }

    /// Gradient accumulated for `v` by the last `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad()
    }

    fn push(&mut self, tensor: Tensor, rg: bool) -> Var {
        let mut t = tensor;
        t.set_requires_grad(rg);
        self.var(t)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// 2-D cross-correlation, zero padding. Input `[N,C,H,W]`, kernel
    /// `[O,I,KH,KW]` with `I == C`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        if x.shape().len() != 4 || k.shape().len() != 4 {
            return Err(CoreError::DimensionError(alloc::format!(
                "conv2d expects 4-D input and kernel, got {} and {}",
                shape_string(x.shape()),
                shape_string(k.shape())
            )));
        }
        if stride == 0 {
            return Err(CoreError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, i, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if i != c {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "conv2d kernel expects {} input channels, image has {}",
                i, c
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(CoreError::DimensionError(alloc::format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh, kw, h + 2 * padding, w + 2 * padding
            )));
        }
        if (h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0 {
            return Err(CoreError::DimensionError(alloc::format!(
                "conv2d spatial dims {}x{} incompatible with kernel {}x{}, stride {}, padding {}",
                h, w, kh, kw, stride, padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let mut out = vec![0.0; n * o * oh * ow];
        conv2d_forward(
            x.data(), k.data(), &mut out,
            ConvDims { n, c, h, w, o, kh, kw, oh, ow, stride, padding },
        );
        let rg = self.rg(input) || self.rg(kernel);
        let out_var = self.push(Tensor::new(vec![n, o, oh, ow], out)?, rg);
        self.ops.push(Op::Conv2d { input, kernel, out: out_var, stride, padding });
        Ok(out_var)
    }

    /// Add a per-channel bias to a `[N,C,H,W]` tensor.
    pub fn bias_channel(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.shape().len() != 4 || b.shape().len() != 1 || b.len() != x.shape()[1] {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "bias_channel: input {} vs bias {}",
                shape_string(x.shape()),
                shape_string(b.shape())
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let mut out = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = b.data()[ci];
                let base = (ni * c + ci) * plane;
                for v in &mut out[base..base + plane] {
                    *v += bv;
                }
            }
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(input) || self.rg(bias);
        let out_var = self.push(Tensor::new(shape, out)?, rg);
        self.ops.push(Op::BiasChannel { input, bias, out: out_var });
        Ok(out_var)
    }

    /// Non-overlapping max pooling. Gradient goes to the first maximal
    /// element of each window (row-major) on ties.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(CoreError::DimensionError(alloc::format!(
                "maxpool2d expects 4-D input, got {}",
                shape_string(x.shape())
            )));
        }
        if window == 0 {
            return Err(CoreError::InvalidArgument("maxpool2d window must be >= 1".into()));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % window != 0 || w % window != 0 {
            return Err(CoreError::DimensionError(alloc::format!(
                "maxpool2d window {} does not divide {}x{}",
                window, h, w
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let data = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let in_base = (ni * c + ci) * h * w;
                let out_base = (ni * c + ci) * oh * ow;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best_idx = in_base + ohi * window * w + owi * window;
                        let mut best = data[best_idx];
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = in_base + (ohi * window + dy) * w + owi * window + dx;
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[out_base + ohi * ow + owi] = best;
                        argmax[out_base + ohi * ow + owi] = best_idx;
                    }
                }
            }
        }
        let rg = self.rg(input);
        let out_var = self.push(Tensor::new(vec![n, c, oh, ow], out)?, rg);
        self.ops.push(Op::MaxPool2d { input, out: out_var, argmax });
        Ok(out_var)
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            return Err(CoreError::DimensionError(alloc::format!(
                "upsample2d expects 4-D input, got {}",
                shape_string(x.shape())
            )));
        }
        if factor < 1 {
            return Err(CoreError::InvalidArgument("upsample2d factor must be >= 1".into()));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        let data = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let in_base = (ni * c + ci) * h * w;
                let out_base = (ni * c + ci) * oh * ow;
                for ohi in 0..oh {
                    let ih = ohi / factor;
                    for owi in 0..ow {
                        out[out_base + ohi * ow + owi] = data[in_base + ih * w + owi / factor];
                    }
                }
            }
        }
        let rg = self.rg(input);
        let out_var = self.push(Tensor::new(vec![n, c, oh, ow], out)?, rg);
        self.ops.push(Op::Upsample2d { input, out: out_var, factor });
        Ok(out_var)
    }

    /// Affine map `w x + b`. Input `[F]` or `[N,F]`, weight `[O,F]`, bias `[O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let (rows, feat) = match x.shape() {
            [f] => (1, *f),
            [n, f] => (*n, *f),
            other => {
                return Err(CoreError::DimensionError(alloc::format!(
                    "dense expects 1-D or 2-D input, got {}",
                    shape_string(other)
                )))
            }
        };
        if wt.shape().len() != 2 || wt.shape()[1] != feat {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "dense weight {} incompatible with input features {}",
                shape_string(wt.shape()),
                feat
            )));
        }
        let out_features = wt.shape()[0];
        if b.shape() != [out_features] {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "dense bias {} incompatible with {} outputs",
                shape_string(b.shape()),
                out_features
            )));
        }
        let mut out = vec![0.0; rows * out_features];
        for r in 0..rows {
            let xrow = &x.data()[r * feat..(r + 1) * feat];
            for (o, out_v) in out[r * out_features..(r + 1) * out_features].iter_mut().enumerate() {
                let wrow = &wt.data()[o * feat..(o + 1) * feat];
                let mut acc = b.data()[o];
                for (wv, xv) in wrow.iter().zip(xrow) {
                    acc += wv * xv;
                }
                *out_v = acc;
            }
        }
        let shape = if x.shape().len() == 1 { vec![out_features] } else { vec![rows, out_features] };
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let out_var = self.push(Tensor::new(shape, out)?, rg);
        self.ops.push(Op::Dense { input, weight, bias, out: out_var });
        Ok(out_var)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.data(input).iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.rg(input);
        let out_var = self.push(Tensor::raw(shape, out), rg);
        self.ops.push(Op::Relu { input, out: out_var });
        out_var
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.data(input).iter().map(|v| math::sigmoid(*v)).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.rg(input);
        let out_var = self.push(Tensor::raw(shape, out), rg);
        self.ops.push(Op::Sigmoid { input, out: out_var });
        out_var
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self.data(input).iter().map(|v| math::tanh(*v)).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.rg(input);
        let out_var = self.push(Tensor::raw(shape, out), rg);
        self.ops.push(Op::Tanh { input, out: out_var });
        out_var
    }

    /// Numerically stabilized softmax over a 1-D logit vector.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 1 {
            return Err(CoreError::DimensionError(alloc::format!(
                "softmax expects a 1-D logit vector, got {}",
                shape_string(x.shape())
            )));
        }
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data().iter().map(|v| math::exp(v - max)).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let rg = self.rg(input);
        let out_var = self.push(Tensor::from_vec(out), rg);
        self.ops.push(Op::Softmax { input, out: out_var });
        Ok(out_var)
    }

    /// `-log softmax(logits)[label]`, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().len() != 1 {
            return Err(CoreError::DimensionError(alloc::format!(
                "cross_entropy expects a 1-D logit vector, got {}",
                shape_string(x.shape())
            )));
        }
        if label >= x.len() {
            return Err(CoreError::LabelOutOfRange { label, classes: x.len() });
        }
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = x.data().iter().map(|v| math::exp(v - max)).sum();
        let lse = max + math::ln(sum);
        let loss = lse - x.data()[label];
        let rg = self.rg(logits);
        let out_var = self.push(Tensor::scalar(loss), rg);
        self.ops.push(Op::CrossEntropy { logits, label, out: out_var });
        Ok(out_var)
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "mse_scalar: {} vs {}",
                shape_string(self.value(a).shape()),
                shape_string(self.value(b).shape())
            )));
        }
        let n = self.value(a).len() as f64;
        let sum: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        let out_var = self.push(Tensor::scalar(sum / n), rg);
        self.ops.push(Op::MseScalar { a, b, out: out_var });
        Ok(out_var)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, false)
    }

    fn elementwise_pair(&mut self, a: Var, b: Var, is_add: bool) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "elementwise op: {} vs {}",
                shape_string(self.value(a).shape()),
                shape_string(self.value(b).shape())
            )));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| if is_add { x + y } else { x - y })
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        let out_var = self.push(Tensor::new(shape, out)?, rg);
        self.ops.push(if is_add {
            Op::Add { a, b, out: out_var }
        } else {
            Op::Sub { a, b, out: out_var }
        });
        Ok(out_var)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, input: Var, mul: f64, add: f64) -> Var {
        let out: Vec<f64> = self.data(input).iter().map(|v| mul * v + add).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.rg(input);
        let out_var = self.push(Tensor::raw(shape, out), rg);
        self.ops.push(Op::Affine { input, mul, out: out_var });
        out_var
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.data(input).iter().sum();
        let rg = self.rg(input);
        let out_var = self.push(Tensor::scalar(s), rg);
        self.ops.push(Op::Sum { input, out: out_var });
        out_var
    }

    /// Sum of squared elements (the squared L2 norm).
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s: f64 = self.data(input).iter().map(|v| v * v).sum();
        let rg = self.rg(input);
        let out_var = self.push(Tensor::scalar(s), rg);
        self.ops.push(Op::SumSquares { input, out: out_var });
        out_var
    }

    /// `logits[pos] - logits[neg]` as a scalar.
    pub fn logit_diff(&mut self, logits: Var, pos: usize, neg: usize) -> Result<Var> {
        let x = self.value(logits);
        if pos >= x.len() || neg >= x.len() {
            return Err(CoreError::LabelOutOfRange {
                label: pos.max(neg),
                classes: x.len(),
            });
        }
        let v = x.data()[pos] - x.data()[neg];
        let rg = self.rg(logits);
        let out_var = self.push(Tensor::scalar(v), rg);
        self.ops.push(Op::LogitDiff { logits, pos, neg, out: out_var });
        Ok(out_var)
    }

    /// The attack penalty `max(max_{i != t} z_i - z_t, -confidence)`.
    /// Negative once the target class leads by at least `confidence`.
    pub fn cw_margin(&mut self, logits: Var, target: usize, confidence: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.len() < 2 {
            return Err(CoreError::InvalidArgument("cw_margin needs >= 2 classes".into()));
        }
        if target >= x.len() {
            return Err(CoreError::LabelOutOfRange { label: target, classes: x.len() });
        }
        let v = cw_margin_value(x.data(), target, confidence);
        let rg = self.rg(logits);
        let out_var = self.push(Tensor::scalar(v), rg);
        self.ops.push(Op::CwMargin { logits, target, confidence, out: out_var });
        Ok(out_var)
    }

    /// View the same data under a new shape.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input).reshape(shape)?;
        let rg = self.rg(input);
        let out_var = self.push(t, rg);
        self.ops.push(Op::Reshape { input, out: out_var });
        Ok(out_var)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients for every `requires_grad` node reachable from
    /// `loss`. Resets previous gradients first, so a tape can be swept from
    /// several scalars in turn.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::NonScalarLoss { elements: self.value(loss).len() });
        }
        for node in &mut self.nodes {
            *node.grad_mut() = None;
        }
        *self.nodes[loss.0].grad_mut() = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn out_grad(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad().map(|g| g.to_vec())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad() {
            return;
        }
        let len = self.nodes[v.0].len();
        debug_assert_eq!(len, delta.len());
        let slot = self.nodes[v.0].grad_mut();
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Conv2d { input, kernel, out, stride, padding } => {
                let Some(dout) = self.out_grad(*out) else { return };
                let x = self.value(*input);
                let k = self.value(*kernel);
                let dims = ConvDims {
                    n: x.shape()[0],
                    c: x.shape()[1],
                    h: x.shape()[2],
                    w: x.shape()[3],
                    o: k.shape()[0],
                    kh: k.shape()[2],
                    kw: k.shape()[3],
                    oh: self.value(*out).shape()[2],
                    ow: self.value(*out).shape()[3],
                    stride: *stride,
                    padding: *padding,
                };
                if self.rg(*input) {
                    let mut dx = vec![0.0; self.value(*input).len()];
                    conv2d_backward_input(self.data(*kernel), &dout, &mut dx, dims);
                    self.accumulate(*input, &dx);
                }
                if self.rg(*kernel) {
                    let mut dk = vec![0.0; self.value(*kernel).len()];
                    conv2d_backward_kernel(self.data(*input), &dout, &mut dk, dims);
                    self.accumulate(*kernel, &dk);
                }
            }
            Op::BiasChannel { input, bias, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    self.accumulate(*input, &dout);
                }
                if self.rg(*bias) {
                    let shape = self.value(*input).shape();
                    let (n, c) = (shape[0], shape[1]);
                    let plane = shape[2] * shape[3];
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for (ci, db_v) in db.iter_mut().enumerate() {
                            let base = (ni * c + ci) * plane;
                            *db_v += dout[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::MaxPool2d { input, out, argmax } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let mut dx = vec![0.0; self.value(*input).len()];
                    for (g, idx) in dout.iter().zip(argmax) {
                        dx[*idx] += g;
                    }
                    self.accumulate(*input, &dx);
                }
            }
            Op::Upsample2d { input, out, factor } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let shape = self.value(*input).shape();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = vec![0.0; self.value(*input).len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let in_base = (ni * c + ci) * h * w;
                            let out_base = (ni * c + ci) * oh * ow;
                            for ohi in 0..oh {
                                let ih = ohi / factor;
                                for owi in 0..ow {
                                    dx[in_base + ih * w + owi / factor] +=
                                        dout[out_base + ohi * ow + owi];
                                }
                            }
                        }
                    }
                    self.accumulate(*input, &dx);
                }
            }
            Op::Dense { input, weight, bias, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                let feat = self.value(*weight).shape()[1];
                let out_features = self.value(*weight).shape()[0];
                let rows = self.value(*input).len() / feat;
                if self.rg(*input) {
                    let mut dx = vec![0.0; rows * feat];
                    let wdata = self.data(*weight);
                    for r in 0..rows {
                        for o in 0..out_features {
                            let g = dout[r * out_features + o];
                            let wrow = &wdata[o * feat..(o + 1) * feat];
                            for (dx_v, wv) in dx[r * feat..(r + 1) * feat].iter_mut().zip(wrow) {
                                *dx_v += g * wv;
                            }
                        }
                    }
                    self.accumulate(*input, &dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; out_features * feat];
                    let xdata = self.data(*input);
                    for r in 0..rows {
                        let xrow = &xdata[r * feat..(r + 1) * feat];
                        for o in 0..out_features {
                            let g = dout[r * out_features + o];
                            for (dw_v, xv) in dw[o * feat..(o + 1) * feat].iter_mut().zip(xrow) {
                                *dw_v += g * xv;
                            }
                        }
                    }
                    self.accumulate(*weight, &dw);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; out_features];
                    for r in 0..rows {
                        for (db_v, g) in db.iter_mut().zip(&dout[r * out_features..]) {
                            *db_v += g;
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Relu { input, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let dx: Vec<f64> = self
                        .data(*input)
                        .iter()
                        .zip(&dout)
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*input, &dx);
                }
            }
            Op::Sigmoid { input, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let dx: Vec<f64> = self
                        .data(*out)
                        .iter()
                        .zip(&dout)
                        .map(|(y, g)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(*input, &dx);
                }
            }
            Op::Tanh { input, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let dx: Vec<f64> = self
                        .data(*out)
                        .iter()
                        .zip(&dout)
                        .map(|(y, g)| g * (1.0 - y * y))
                        .collect();
                    self.accumulate(*input, &dx);
                }
            }
            Op::Softmax { input, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let y = self.data(*out);
                    let dot: f64 = y.iter().zip(&dout).map(|(yi, gi)| yi * gi).sum();
                    let dx: Vec<f64> = y.iter().zip(&dout).map(|(yi, gi)| yi * (gi - dot)).collect();
                    self.accumulate(*input, &dx);
                }
            }
            Op::CrossEntropy { logits, label, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*logits) {
                    let data = self.data(*logits);
                    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = data.iter().map(|v| math::exp(v - max)).collect();
                    let sum: f64 = exps.iter().sum();
                    let g = dout[0];
                    let dx: Vec<f64> = exps
                        .iter()
                        .enumerate()
                        .map(|(i, e)| g * (e / sum - if i == *label { 1.0 } else { 0.0 }))
                        .collect();
                    self.accumulate(*logits, &dx);
                }
            }
            Op::MseScalar { a, b, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                let n = self.value(*a).len() as f64;
                let g = dout[0];
                if self.rg(*a) {
                    let da: Vec<f64> = self
                        .data(*a)
                        .iter()
                        .zip(self.data(*b))
                        .map(|(x, y)| g * 2.0 * (x - y) / n)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = self
                        .data(*a)
                        .iter()
                        .zip(self.data(*b))
                        .map(|(x, y)| -g * 2.0 * (x - y) / n)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                self.accumulate(*a, &dout);
                self.accumulate(*b, &dout);
            }
            Op::Sub { a, b, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                self.accumulate(*a, &dout);
                let neg: Vec<f64> = dout.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Affine { input, mul, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let dx: Vec<f64> = dout.iter().map(|g| mul * g).collect();
                    self.accumulate(*input, &dx);
                }
            }
            Op::Sum { input, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let dx = vec![dout[0]; self.value(*input).len()];
                    self.accumulate(*input, &dx);
                }
            }
            Op::SumSquares { input, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*input) {
                    let g = dout[0];
                    let dx: Vec<f64> = self.data(*input).iter().map(|x| 2.0 * g * x).collect();
                    self.accumulate(*input, &dx);
                }
            }
            Op::LogitDiff { logits, pos, neg, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*logits) {
                    let mut dx = vec![0.0; self.value(*logits).len()];
                    dx[*pos] += dout[0];
                    dx[*neg] -= dout[0];
                    self.accumulate(*logits, &dx);
                }
            }
            Op::CwMargin { logits, target, confidence, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                if self.rg(*logits) {
                    let data = self.data(*logits);
                    let (best, diff) = cw_margin_parts(data, *target);
                    let mut dx = vec![0.0; data.len()];
                    // Subgradient: zero once the margin floor is active.
                    if diff > -confidence {
                        dx[best] += dout[0];
                        dx[*target] -= dout[0];
                    }
                    self.accumulate(*logits, &dx);
                }
            }
            Op::Reshape { input, out } => {
                let Some(dout) = self.out_grad(*out) else { return };
                self.accumulate(*input, &dout);
            }
        }
    }
}

/// Best non-target logit index and `z_best - z_target`.
fn cw_margin_parts(logits: &[f64], target: usize) -> (usize, f64) {
    let mut best = usize::MAX;
    for (i, v) in logits.iter().enumerate() {
        if i == target {
            continue;
        }
        if best == usize::MAX || *v > logits[best] {
            best = i;
        }
    }
    (best, logits[best] - logits[target])
}

/// `max(max_{i != t} z_i - z_t, -confidence)`, usable outside a tape.
pub(crate) fn cw_margin_value(logits: &[f64], target: usize, confidence: f64) -> f64 {
    let (_, diff) = cw_margin_parts(logits, target);
    diff.max(-confidence)
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv2d_forward(x: &[f64], k: &[f64], out: &mut [f64], d: ConvDims) {
    if d.stride == 1 {
        // Shifted-row formulation: for each kernel tap, add a scaled slice of
        // the input row to the output row over the valid range.
        for n in 0..d.n {
            for o in 0..d.o {
                let out_plane = &mut out[(n * d.o + o) * d.oh * d.ow..][..d.oh * d.ow];
                for i in 0..d.c {
                    let x_plane = &x[(n * d.c + i) * d.h * d.w..][..d.h * d.w];
                    let k_base = ((o * d.c + i) * d.kh) * d.kw;
                    for kh in 0..d.kh {
                        let oh_lo = d.padding.saturating_sub(kh);
                        let oh_hi = (d.h + d.padding).saturating_sub(kh).min(d.oh);
                        for kw in 0..d.kw {
                            let kv = k[k_base + kh * d.kw + kw];
                            let ow_lo = d.padding.saturating_sub(kw);
                            let ow_hi = (d.w + d.padding).saturating_sub(kw).min(d.ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let count = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - d.padding;
                                let x_start = ih * d.w + (ow_lo + kw - d.padding);
                                let o_start = oh * d.ow + ow_lo;
                                let xs = &x_plane[x_start..x_start + count];
                                let os = &mut out_plane[o_start..o_start + count];
                                for (ov, xv) in os.iter_mut().zip(xs) {
                                    *ov += kv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    // Generic stride.
    for n in 0..d.n {
        for o in 0..d.o {
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    let mut acc = 0.0;
                    for i in 0..d.c {
                        for kh in 0..d.kh {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..d.kw {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                acc += x[((n * d.c + i) * d.h + ih as usize) * d.w + iw as usize]
                                    * k[((o * d.c + i) * d.kh + kh) * d.kw + kw];
                            }
                        }
                    }
                    out[((n * d.o + o) * d.oh + oh) * d.ow + ow] = acc;
                }
            }
        }
    }
}

fn conv2d_backward_input(k: &[f64], dout: &[f64], dx: &mut [f64], d: ConvDims) {
    if d.stride == 1 {
        for n in 0..d.n {
            for o in 0..d.o {
                let dout_plane = &dout[(n * d.o + o) * d.oh * d.ow..][..d.oh * d.ow];
                for i in 0..d.c {
                    let dx_plane = &mut dx[(n * d.c + i) * d.h * d.w..][..d.h * d.w];
                    let k_base = ((o * d.c + i) * d.kh) * d.kw;
                    for kh in 0..d.kh {
                        let oh_lo = d.padding.saturating_sub(kh);
                        let oh_hi = (d.h + d.padding).saturating_sub(kh).min(d.oh);
                        for kw in 0..d.kw {
                            let kv = k[k_base + kh * d.kw + kw];
                            let ow_lo = d.padding.saturating_sub(kw);
                            let ow_hi = (d.w + d.padding).saturating_sub(kw).min(d.ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let count = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - d.padding;
                                let x_start = ih * d.w + (ow_lo + kw - d.padding);
                                let o_start = oh * d.ow + ow_lo;
                                let dxs = &mut dx_plane[x_start..x_start + count];
                                let gs = &dout_plane[o_start..o_start + count];
                                for (dxv, gv) in dxs.iter_mut().zip(gs) {
                                    *dxv += kv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    for n in 0..d.n {
        for o in 0..d.o {
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    let g = dout[((n * d.o + o) * d.oh + oh) * d.ow + ow];
                    for i in 0..d.c {
                        for kh in 0..d.kh {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..d.kw {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                dx[((n * d.c + i) * d.h + ih as usize) * d.w + iw as usize] +=
                                    g * k[((o * d.c + i) * d.kh + kh) * d.kw + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(x: &[f64], dout: &[f64], dk: &mut [f64], d: ConvDims) {
    if d.stride == 1 {
        for n in 0..d.n {
            for o in 0..d.o {
                let dout_plane = &dout[(n * d.o + o) * d.oh * d.ow..][..d.oh * d.ow];
                for i in 0..d.c {
                    let x_plane = &x[(n * d.c + i) * d.h * d.w..][..d.h * d.w];
                    let k_base = ((o * d.c + i) * d.kh) * d.kw;
                    for kh in 0..d.kh {
                        let oh_lo = d.padding.saturating_sub(kh);
                        let oh_hi = (d.h + d.padding).saturating_sub(kh).min(d.oh);
                        for kw in 0..d.kw {
                            let ow_lo = d.padding.saturating_sub(kw);
                            let ow_hi = (d.w + d.padding).saturating_sub(kw).min(d.ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let count = ow_hi - ow_lo;
                            let mut acc = 0.0;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - d.padding;
                                let x_start = ih * d.w + (ow_lo + kw - d.padding);
                                let o_start = oh * d.ow + ow_lo;
                                let xs = &x_plane[x_start..x_start + count];
                                let gs = &dout_plane[o_start..o_start + count];
                                for (xv, gv) in xs.iter().zip(gs) {
                                    acc += xv * gv;
                                }
                            }
                            dk[k_base + kh * d.kw + kw] += acc;
                        }
                    }
                }
            }
        }
        return;
    }
    for n in 0..d.n {
        for o in 0..d.o {
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    let g = dout[((n * d.o + o) * d.oh + oh) * d.ow + ow];
                    for i in 0..d.c {
                        for kh in 0..d.kh {
                            let ih = (oh * d.stride + kh) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..d.kw {
                                let iw = (ow * d.stride + kw) as isize - d.padding as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                dk[((o * d.c + i) * d.kh + kh) * d.kw + kw] +=
                                    g * x[((n * d.c + i) * d.h + ih as usize) * d.w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
