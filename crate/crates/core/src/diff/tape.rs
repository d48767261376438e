//! Reverse-mode differentiation over a linear operation tape.
//!
//! Forward calls compute values immediately and, when any input requires a
//! gradient, record the operation. `backward` replays the tape in reverse,
//! accumulating exactly one gradient per requires-grad leaf. Everything is
//! `f64` and single-threaded; two backward passes over identical tapes are
//! bit-identical.

use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Elementwise clamp-like primitive with caller-supplied gradients.
///
/// `value(x, alpha, ctx)` computes the forward output for one element;
/// `dx` and `dalpha` give the gradient of that element w.r.t. the input
/// and the scalar clip parameter. `ctx` carries a per-op constant (the
/// quantizer grid level count, unused for plain clipping).
#[derive(Clone, Copy)]
pub struct ClampHook {
    pub value: fn(f64, f64, f64) -> f64,
    pub dx: fn(f64, f64, f64) -> f64,
    pub dalpha: fn(f64, f64, f64) -> f64,
}

/// Scalar-to-scalar primitive with a caller-supplied derivative, used for
/// penalty terms whose piecewise closed forms live outside the tape.
#[derive(Clone, Copy)]
pub struct ScalarHook {
    pub value: fn(f64, &[f64; 4]) -> f64,
    pub deriv: fn(f64, &[f64; 4]) -> f64,
    pub ctx: [f64; 4],
}

enum Op {
    Add { a: Value, b: Value, out: Value },
    Sub { a: Value, b: Value, out: Value },
    Mul { a: Value, b: Value, out: Value },
    AddBias { x: Value, bias: Value, out: Value },
    MulConst { x: Value, k: f64, out: Value },
    ScaleBy { s: Value, x: Value, out: Value },
    Pick { x: Value, idx: usize, out: Value },
    Matmul { a: Value, b: Value, out: Value },
    Conv2d { x: Value, w: Value, out: Value },
    Reshape { x: Value, out: Value },
    Relu { x: Value, out: Value },
    SoftmaxLast { x: Value, out: Value, cols: usize },
    Sum { x: Value, out: Value },
    Mean { x: Value, out: Value },
    Ln { x: Value, out: Value },
    Sqrt { x: Value, out: Value },
    CrossEntropyLogits { logits: Value, labels: Vec<usize>, out: Value },
    DotConst { x: Value, weights: Vec<f64>, out: Value },
    OneMinusProd { x: Value, out: Value },
    Clamp { x: Value, alpha: Value, hook: ClampHook, ctx: f64, out: Value },
    ScalarFn { x: Value, hook: ScalarHook, out: Value },
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    is_leaf: Vec<bool>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, t: Tensor, is_leaf: bool) -> Value {
        let id = self.values.len();
        self.values.push(t);
        self.is_leaf.push(is_leaf);
        self.grads.push(None);
        Value(id)
    }

    /// Register an input value; its `requires_grad` flag decides whether
    /// backward produces a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, true)
    }

    /// Register a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t.with_requires_grad(false), true)
    }

    pub fn scalar_const(&mut self, v: f64) -> Value {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last backward root w.r.t. `v`, if one was produced.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn requires(&self, v: Value) -> bool {
        self.values[v.0].requires_grad
    }

    fn emit(&mut self, data: Tensor, rg: bool, op: impl FnOnce(Value) -> Op) -> Value {
        let out = self.push(data.with_requires_grad(rg), false);
        if rg {
            self.ops.push(op(out));
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    // ---- primitives ----------------------------------------------------

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.emit(t, rg, |out| Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.emit(t, rg, |out| Op::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.emit(t, rg, |out| Op::Mul { a, b, out }))
    }

    /// Add a per-channel bias: `x` has rank >= 2 and `bias` length equals
    /// `x.shape()[1]`; the bias broadcasts over every other axis.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[bias.0].shape().to_vec();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let b = self.values[bias.0].data();
        let mut data = self.values[x.0].data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        let t = Tensor::new(xs, data)?;
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.emit(t, rg, |out| Op::AddBias { x, bias, out }))
    }

    pub fn mul_const(&mut self, x: Value, k: f64) -> Result<Value> {
        let t = self.values[x.0].map(|v| v * k);
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::MulConst { x, k, out }))
    }

    /// Multiply a tensor by a scalar tape value.
    pub fn scale_by(&mut self, s: Value, x: Value) -> Result<Value> {
        let sv = self.values[s.0].item().map_err(|_| Error::NotScalar {
            op: "scale_by",
            shape: self.values[s.0].shape().to_vec(),
        })?;
        let t = self.values[x.0].map(|v| v * sv);
        let rg = self.requires(s) || self.requires(x);
        Ok(self.emit(t, rg, |out| Op::ScaleBy { s, x, out }))
    }

    /// Extract one element of a rank-1 tensor as a scalar.
    pub fn pick(&mut self, x: Value, idx: usize) -> Result<Value> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 1 || idx >= xv.numel() {
            return Err(Error::invalid(format!(
                "pick: index {idx} out of bounds for shape {:?}",
                xv.shape()
            )));
        }
        let t = Tensor::scalar(xv.data()[idx]);
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::Pick { x, idx, out }))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ashape, bshape) = (
            self.values[a.0].shape().to_vec(),
            self.values[b.0].shape().to_vec(),
        );
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let data = matmul_f64(self.values[a.0].data(), self.values[b.0].data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.emit(t, rg, |out| Op::Matmul { a, b, out }))
    }

    /// 2-D convolution, stride 1, no padding: `x` is NCHW, `w` is OIKK.
    pub fn conv2d(&mut self, x: Value, w: Value) -> Result<Value> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        let bad = xs.len() != 4
            || ws.len() != 4
            || xs[1] != ws[1]
            || ws[2] != ws[3]
            || xs[2] < ws[2]
            || xs[3] < ws[3];
        if bad {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let (ho, wo) = (h - k + 1, wd - k + 1);
        let xd = self.values[x.0].data();
        let wdat = self.values[w.0].data();
        let mut data = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let xi = ((ni * cin + ci) * h + oy + ky) * wd + ox + kx;
                                    let wi = ((co * cin + ci) * k + ky) * k + kx;
                                    acc += xd[xi] * wdat[wi];
                                }
                            }
                        }
                        data[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, cout, ho, wo], data)?;
        let rg = self.requires(x) || self.requires(w);
        Ok(self.emit(t, rg, |out| Op::Conv2d { x, w, out }))
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let t = Tensor::new(shape, self.values[x.0].data().to_vec())?;
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::Reshape { x, out }))
    }

    pub fn relu(&mut self, x: Value) -> Result<Value> {
        let t = self.values[x.0].map(|v| v.max(0.0));
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::Relu { x, out }))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Value) -> Result<Value> {
        let xv = &self.values[x.0];
        if xv.shape().is_empty() {
            return Err(Error::NotScalar {
                op: "softmax (needs rank >= 1)",
                shape: vec![],
            });
        }
        let cols = *xv.shape().last().unwrap();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::SoftmaxLast { x, out, cols }))
    }

    pub fn sum(&mut self, x: Value) -> Result<Value> {
        let t = Tensor::scalar(self.values[x.0].iter().sum());
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::Sum { x, out }))
    }

    pub fn mean(&mut self, x: Value) -> Result<Value> {
        let n = self.values[x.0].numel() as f64;
        let t = Tensor::scalar(self.values[x.0].iter().sum::<f64>() / n);
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::Mean { x, out }))
    }

    pub fn ln(&mut self, x: Value) -> Result<Value> {
        let t = self.values[x.0].map(f64::ln);
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::Ln { x, out }))
    }

    pub fn sqrt(&mut self, x: Value) -> Result<Value> {
        let t = self.values[x.0].map(f64::sqrt);
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::Sqrt { x, out }))
    }

    /// Mean cross-entropy between rows of `logits` and integer labels,
    /// fused with a stable log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Value, labels: &[usize]) -> Result<Value> {
        let lv = &self.values[logits.0];
        let shape = lv.shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy_logits: label {bad} out of range for {c} classes"
            )));
        }
        let mut loss = 0.0;
        for (row, &y) in lv.data().chunks(c).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let t = Tensor::scalar(loss / n as f64);
        let rg = self.requires(logits);
        let labels = labels.to_vec();
        Ok(self.emit(t, rg, |out| Op::CrossEntropyLogits { logits, labels, out }))
    }

    /// Dot product of a rank-1 value with a constant weight vector.
    pub fn dot_const(&mut self, x: Value, weights: &[f64]) -> Result<Value> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 1 || xv.numel() != weights.len() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let t = Tensor::scalar(xv.iter().zip(weights).map(|(a, b)| a * b).sum());
        let rg = self.requires(x);
        let weights = weights.to_vec();
        Ok(self.emit(t, rg, |out| Op::DotConst { x, weights, out }))
    }

    /// `prod_j (1 - x_j)` over a rank-1 value. The gradient uses exact
    /// leave-one-out products, so it stays correct when factors hit zero.
    pub fn one_minus_prod(&mut self, x: Value) -> Result<Value> {
        let xv = &self.values[x.0];
        if xv.shape().len() != 1 {
            return Err(Error::invalid(format!(
                "one_minus_prod: expected rank-1, got {:?}",
                xv.shape()
            )));
        }
        let t = Tensor::scalar(xv.iter().map(|&p| 1.0 - p).product());
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::OneMinusProd { x, out }))
    }

    /// Elementwise clamp-family op with custom gradients; `alpha` is a
    /// scalar tape value receiving the summed clip-parameter gradient.
    pub fn clamp_hook(&mut self, x: Value, alpha: Value, hook: ClampHook, ctx: f64) -> Result<Value> {
        let av = self.values[alpha.0].item().map_err(|_| Error::NotScalar {
            op: "clamp_hook (alpha)",
            shape: self.values[alpha.0].shape().to_vec(),
        })?;
        let t = self.values[x.0].map(|v| (hook.value)(v, av, ctx));
        let rg = self.requires(x) || self.requires(alpha);
        Ok(self.emit(t, rg, |out| Op::Clamp { x, alpha, hook, ctx, out }))
    }

    /// Scalar function with a caller-supplied derivative.
    pub fn scalar_fn(&mut self, x: Value, hook: ScalarHook) -> Result<Value> {
        let xv = self.values[x.0].item().map_err(|_| Error::NotScalar {
            op: "scalar_fn",
            shape: self.values[x.0].shape().to_vec(),
        })?;
        let t = Tensor::scalar((hook.value)(xv, &hook.ctx));
        let rg = self.requires(x);
        Ok(self.emit(t, rg, |out| Op::ScalarFn { x, hook, out }))
    }

    // ---- backward -------------------------------------------------------

    /// Run reverse accumulation from a scalar root. Every requires-grad
    /// leaf ends up with a gradient (zeros when the root does not depend
    /// on it).
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.ran_backward {
            return Err(Error::invalid("backward already run on this tape"));
        }
        if self.values[root.0].numel() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.values[root.0].shape().to_vec(),
            });
        }
        self.ran_backward = true;
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }

        for i in 0..self.values.len() {
            if self.is_leaf[i] && self.values[i].requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.values[i].numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Value, contrib: Vec<f64>) {
        if !self.values[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            None => self.grads[v.0] = Some(contrib),
        }
    }

    fn out_grad(&self, out: Value) -> Option<Vec<f64>> {
        self.grads[out.0].clone()
    }

    fn backward_op(&mut self, idx: usize) {
        // Ops are cheap to re-borrow field-by-field; clone the small parts.
        match &self.ops[idx] {
            &Op::Add { a, b, out } => {
                if let Some(d) = self.out_grad(out) {
                    self.accumulate(a, d.clone());
                    self.accumulate(b, d);
                }
            }
            &Op::Sub { a, b, out } => {
                if let Some(d) = self.out_grad(out) {
                    self.accumulate(a, d.clone());
                    self.accumulate(b, d.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul { a, b, out } => {
                if let Some(d) = self.out_grad(out) {
                    let da: Vec<f64> = d
                        .iter()
                        .zip(self.values[b.0].iter())
                        .map(|(g, v)| g * v)
                        .collect();
                    let db: Vec<f64> = d
                        .iter()
                        .zip(self.values[a.0].iter())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            &Op::AddBias { x, bias, out } => {
                if let Some(d) = self.out_grad(out) {
                    let xs = self.values[x.0].shape();
                    let channels = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut db = vec![0.0; channels];
                    for (i, g) in d.iter().enumerate() {
                        db[(i / inner) % channels] += g;
                    }
                    self.accumulate(x, d);
                    self.accumulate(bias, db);
                }
            }
            &Op::MulConst { x, k, out } => {
                if let Some(d) = self.out_grad(out) {
                    self.accumulate(x, d.iter().map(|v| v * k).collect());
                }
            }
            &Op::ScaleBy { s, x, out } => {
                if let Some(d) = self.out_grad(out) {
                    let sv = self.values[s.0].data()[0];
                    let ds: f64 = d.iter().zip(self.values[x.0].iter()).map(|(g, v)| g * v).sum();
                    self.accumulate(s, vec![ds]);
                    self.accumulate(x, d.iter().map(|v| v * sv).collect());
                }
            }
            &Op::Pick { x, idx, out } => {
                if let Some(d) = self.out_grad(out) {
                    let mut dx = vec![0.0; self.values[x.0].numel()];
                    dx[idx] = d[0];
                    self.accumulate(x, dx);
                }
            }
            &Op::Matmul { a, b, out } => {
                if let Some(d) = self.out_grad(out) {
                    let (m, k) = (self.values[a.0].shape()[0], self.values[a.0].shape()[1]);
                    let n = self.values[b.0].shape()[1];
                    // dA = dOut * B^T, dB = A^T * dOut
                    let bt = transpose_f64(self.values[b.0].data(), k, n);
                    let da = matmul_f64(&d, &bt, m, n, k);
                    let at = transpose_f64(self.values[a.0].data(), m, k);
                    let db = matmul_f64(&at, &d, k, m, n);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
            }
            &Op::Conv2d { x, w, out } => {
                if let Some(d) = self.out_grad(out) {
                    let xs = self.values[x.0].shape().to_vec();
                    let ws = self.values[w.0].shape().to_vec();
                    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (cout, k) = (ws[0], ws[2]);
                    let (ho, wo) = (h - k + 1, wd - k + 1);
                    let xd = self.values[x.0].data().to_vec();
                    let wdat = self.values[w.0].data().to_vec();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dw = vec![0.0; wdat.len()];
                    for ni in 0..n {
                        for co in 0..cout {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let g = d[((ni * cout + co) * ho + oy) * wo + ox];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                let xi =
                                                    ((ni * cin + ci) * h + oy + ky) * wd + ox + kx;
                                                let wi = ((co * cin + ci) * k + ky) * k + kx;
                                                dx[xi] += g * wdat[wi];
                                                dw[wi] += g * xd[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(w, dw);
                }
            }
            &Op::Reshape { x, out } => {
                if let Some(d) = self.out_grad(out) {
                    self.accumulate(x, d);
                }
            }
            &Op::Relu { x, out } => {
                if let Some(d) = self.out_grad(out) {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.values[x.0].iter())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, dx);
                }
            }
            &Op::SoftmaxLast { x, out, cols } => {
                if let Some(d) = self.out_grad(out) {
                    let p = self.values[out.0].data();
                    let mut dx = vec![0.0; p.len()];
                    for r in 0..p.len() / cols {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|j| d[base + j] * p[base + j]).sum();
                        for j in 0..cols {
                            dx[base + j] = p[base + j] * (d[base + j] - dot);
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            &Op::Sum { x, out } => {
                if let Some(d) = self.out_grad(out) {
                    self.accumulate(x, vec![d[0]; self.values[x.0].numel()]);
                }
            }
            &Op::Mean { x, out } => {
                if let Some(d) = self.out_grad(out) {
                    let n = self.values[x.0].numel();
                    self.accumulate(x, vec![d[0] / n as f64; n]);
                }
            }
            &Op::Ln { x, out } => {
                if let Some(d) = self.out_grad(out) {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.values[x.0].iter())
                        .map(|(g, v)| g / v)
                        .collect();
                    self.accumulate(x, dx);
                }
            }
            &Op::Sqrt { x, out } => {
                if let Some(d) = self.out_grad(out) {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.values[out.0].iter())
                        .map(|(g, s)| g / (2.0 * s))
                        .collect();
                    self.accumulate(x, dx);
                }
            }
            Op::CrossEntropyLogits { logits, labels, out } => {
                let (logits, out) = (*logits, *out);
                let labels = labels.clone();
                if let Some(d) = self.out_grad(out) {
                    let lv = self.values[logits.0].data();
                    let c = self.values[logits.0].shape()[1];
                    let n = labels.len();
                    let scale = d[0] / n as f64;
                    let mut dx = vec![0.0; lv.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &lv[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for (j, &v) in row.iter().enumerate() {
                            let e = (v - m).exp();
                            dx[i * c + j] = e;
                            sum += e;
                        }
                        for j in 0..c {
                            dx[i * c + j] /= sum;
                        }
                        dx[i * c + y] -= 1.0;
                        for j in 0..c {
                            dx[i * c + j] *= scale;
                        }
                    }
                    self.accumulate(logits, dx);
                }
            }
            Op::DotConst { x, weights, out } => {
                let (x, out) = (*x, *out);
                let weights = weights.clone();
                if let Some(d) = self.out_grad(out) {
                    self.accumulate(x, weights.iter().map(|w| w * d[0]).collect());
                }
            }
            &Op::OneMinusProd { x, out } => {
                if let Some(d) = self.out_grad(out) {
                    let factors: Vec<f64> = self.values[x.0].iter().map(|&p| 1.0 - p).collect();
                    let n = factors.len();
                    // prefix[j] = prod(factors[..j]), suffix[j] = prod(factors[j+1..])
                    let mut prefix = vec![1.0; n];
                    for j in 1..n {
                        prefix[j] = prefix[j - 1] * factors[j - 1];
                    }
                    let mut suffix = vec![1.0; n];
                    for j in (0..n - 1).rev() {
                        suffix[j] = suffix[j + 1] * factors[j + 1];
                    }
                    let dx: Vec<f64> = (0..n).map(|j| -d[0] * prefix[j] * suffix[j]).collect();
                    self.accumulate(x, dx);
                }
            }
            &Op::Clamp { x, alpha, hook, ctx, out } => {
                if let Some(d) = self.out_grad(out) {
                    let av = self.values[alpha.0].data()[0];
                    let xd = self.values[x.0].data();
                    let mut da = 0.0;
                    let mut dx = vec![0.0; xd.len()];
                    for (i, (&g, &v)) in d.iter().zip(xd).enumerate() {
                        dx[i] = g * (hook.dx)(v, av, ctx);
                        da += g * (hook.dalpha)(v, av, ctx);
                    }
                    self.accumulate(x, dx);
                    self.accumulate(alpha, vec![da]);
                }
            }
            &Op::ScalarFn { x, hook, out } => {
                if let Some(d) = self.out_grad(out) {
                    let xv = self.values[x.0].data()[0];
                    self.accumulate(x, vec![d[0] * (hook.deriv)(xv, &hook.ctx)]);
                }
            }
        }
    }
}

pub(crate) fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_f64(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, data: Vec<f64>) -> Value {
        tape.leaf(Tensor::vector(data).with_requires_grad(true))
    }

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let a_data = vec![0.3, -1.2, 2.0, 0.7, 0.0, 4.1, -0.5, 1.5, 9.0];
        let a = tape.constant(Tensor::matrix(3, 3, a_data.clone()).unwrap());
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y).data(), &a_data[..]);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_constants_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![1.0, 2.0]);
        let c = tape.constant(Tensor::vector(vec![5.0, 7.0]));
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn empty_tape_backward_gives_zeros() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![1.0, 2.0, 3.0]);
        let root = tape.leaf(Tensor::scalar(1.0).with_requires_grad(true));
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(tape.grad(root).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(w),
            Err(Error::NotScalar { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[2]"));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![0.3, -0.7, 1.9, 0.01]);
            let sm = tape.softmax(x).unwrap();
            let s = tape.one_minus_prod(sm).unwrap();
            tape.backward(s).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_value_independent_of_requires_grad() {
        let data = vec![0.5, -1.5, 2.5, 0.0];
        let mut t1 = Tape::new();
        let x1 = t1.constant(Tensor::vector(data.clone()));
        let y1 = t1.relu(x1).unwrap();
        let s1 = t1.softmax(y1).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.leaf(Tensor::vector(data).with_requires_grad(true));
        let y2 = t2.relu(x2).unwrap();
        let s2 = t2.softmax(y2).unwrap();
        assert_eq!(t1.value(s1).data(), t2.value(s2).data());
        assert_eq!(t1.num_ops(), 0);
        assert_eq!(t2.num_ops(), 2);
    }
}
