//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node order is a topological
//! order. `backward` walks the tape from the end; all consumers of a node
//! sit at higher indices, which means its gradient is complete before the
//! node itself is processed.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::Tensor;

/// Cosine arguments are clamped this far inside `[-1, 1]` before `acos`.
pub const COSINE_CLAMP: f64 = 1e-6;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dOptions {
    pub fn new(stride: usize, pad_h: usize, pad_w: usize) -> Self {
        Self { stride, pad_h, pad_w }
    }

    /// Stride 1 with "same" padding for an odd `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self { stride: 1, pad_h: kh / 2, pad_w: kw / 2 }
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    RowSum { x: Var },
    Mse { pred: Var, target: Var },
    CosineAngle { pred: Var, target: Var, clamped: Vec<bool> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::MaxPool { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Reshape { x }
            | Op::Relu { x }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::RowSum { x } => vec![*x],
            Op::Concat { xs } => xs.clone(),
            Op::Add { a, b } => vec![*a, *b],
            Op::Mse { pred, target } | Op::CosineAngle { pred, target, .. } => {
                vec![*pred, *target]
            }
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Allocated exactly when `requires_grad` is set.
    grad: Option<Tensor>,
    op: Op,
}

/// A single forward pass recorded for differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Adds an input tensor. Gradients are tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Shorthand for a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node { value, requires_grad, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    fn check_live(&self) -> Result<()> {
        if self.backward_done {
            Err(AutodiffError::BackwardTwice)
        } else {
            Ok(())
        }
    }

    // ---------------------------------------------------------------- ops

    /// 2-D cross-correlation: `x[B,C,H,W]`, `weight[K,C,kh,kw]`, `bias[K]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, opts: Conv2dOptions) -> Result<Var> {
        self.check_live()?;
        let (batch, in_ch, h, w) = self.value(x).dims4("conv2d")?;
        let (out_ch, wc, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wc != in_ch {
            return Err(shape_err("conv2d", format!("input has {in_ch} channels, weight expects {wc}")));
        }
        if self.value(bias).shape() != [out_ch] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?} for {out_ch} output channels", self.value(bias).shape()),
            ));
        }
        if opts.stride == 0 {
            return Err(AutodiffError::InvalidArgument { op: "conv2d", detail: "stride 0".into() });
        }
        let span_h = h + 2 * opts.pad_h;
        let span_w = w + 2 * opts.pad_w;
        if span_h < kh || span_w < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input")));
        }
        if (span_h - kh) % opts.stride != 0 || (span_w - kw) % opts.stride != 0 {
            return Err(shape_err(
                "conv2d",
                format!("padded input {span_h}x{span_w} not tiled by kernel {kh}x{kw} at stride {}", opts.stride),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride: opts.stride,
            pad_h: opts.pad_h,
            pad_w: opts.pad_w,
            out_h: (span_h - kh) / opts.stride + 1,
            out_w: (span_w - kw) / opts.stride + 1,
        };
        let (out, cols) =
            kernels::conv2d_forward(&geom, self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let value = Tensor::new(&[batch, out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.push_op(value, Op::Conv2d { x, w: weight, b: bias, geom, cols }))
    }

    /// Square max pooling with `-inf` padding.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.check_live()?;
        let (batch, ch, h, w) = self.value(x).dims4("max_pool")?;
        if kernel == 0 || stride == 0 || pad >= kernel {
            return Err(AutodiffError::InvalidArgument {
                op: "max_pool",
                detail: format!("kernel {kernel}, stride {stride}, pad {pad}"),
            });
        }
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(shape_err("max_pool", format!("input {h}x{w} smaller than kernel {kernel}")));
        }
        let geom = PoolGeom {
            batch,
            ch,
            h,
            w,
            kernel,
            stride,
            pad,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (w + 2 * pad - kernel) / stride + 1,
        };
        let (out, argmax) = kernels::max_pool_forward(&geom, self.value(x).data());
        let value = Tensor::new(&[batch, ch, geom.out_h, geom.out_w], out)?;
        Ok(self.push_op(value, Op::MaxPool { x, argmax }))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.max_pool(x, 2, 2, 0)
    }

    /// `[B,C,H,W] -> [B,C,1,1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (batch, ch, h, w) = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(shape_err("global_avg_pool", "empty spatial extent"));
        }
        let data: Vec<f64> = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let value = Tensor::new(&[batch, ch, 1, 1], data)?;
        Ok(self.push_op(value, Op::GlobalAvgPool { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape { x }))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let batch = *shape.first().ok_or_else(|| shape_err("flatten", "rank-0 input"))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[batch, rest])
    }

    /// Fully connected layer: `x[B,In] * weight[Out,In]^T + bias[Out]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let (batch, fan_in) = self.value(x).dims2("dense")?;
        let (fan_out, w_in) = self.value(weight).dims2("dense")?;
        if w_in != fan_in {
            return Err(shape_err("dense", format!("input width {fan_in}, weight expects {w_in}")));
        }
        if self.value(bias).shape() != [fan_out] {
            return Err(shape_err("dense", format!("bias shape {:?} for {fan_out} outputs", self.value(bias).shape())));
        }
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            self.value(x).data(),
            (fan_in, 1),
            self.value(weight).data(),
            (1, fan_in),
            1.0,
            &mut out,
            fan_out,
        );
        let value = Tensor::new(&[batch, fan_out], out)?;
        Ok(self.push_op(value, Op::Dense { x, w: weight, b: bias }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check_live()?;
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push_op(value, op))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, |v| k * v, Op::Scale { x, k })
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = xs.first().ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
        let (batch, _, h, w) = self.value(*first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (b, c, hh, ww) = self.value(v).dims4("concat_channels")?;
            if (b, hh, ww) != (batch, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.value(v).shape(), self.value(*first).shape()),
                ));
            }
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(batch * total * plane);
        for b in 0..batch {
            for (&v, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[batch, total, h, w], out)?;
        Ok(self.push_op(value, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push_op(value, Op::Add { a, b }))
    }

    /// `[B,K] -> [B,1]` sum across each row.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (rows, cols) = self.value(x).dims2("row_sum")?;
        let data = self.value(x).data().chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(&[rows, 1], data)?;
        Ok(self.push_op(value, Op::RowSum { x }))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_live()?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        if p.is_empty() {
            return Err(shape_err("mse", "empty input"));
        }
        let sum: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / p.len() as f64);
        Ok(self.push_op(value, Op::Mse { pred, target }))
    }

    /// Mean angle (radians) between corresponding RGB rows of `pred` and
    /// `target` (`[3]` or `[B,3]`). The cosine is clamped to
    /// `[-1 + COSINE_CLAMP, 1 - COSINE_CLAMP]`, so identical directions
    /// give `acos(1 - 1e-6)` rather than 0.
    pub fn cosine_angle_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_live()?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() || p.shape().last() != Some(&3) || p.rank() > 2 {
            return Err(shape_err(
                "cosine_angle_loss",
                format!("expected matching [3] or [B,3], got {:?} and {:?}", p.shape(), t.shape()),
            ));
        }
        let rows = p.len() / 3;
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(rows);
        for (pr, tr) in p.data().chunks(3).zip(t.data().chunks(3)) {
            let (np, nt) = (norm3(pr), norm3(tr));
            if np == 0.0 || nt == 0.0 {
                return Err(AutodiffError::Degenerate {
                    op: "cosine_angle_loss",
                    detail: "zero-length color vector".into(),
                });
            }
            let c = dot3(pr, tr) / (np * nt);
            let (cc, was_clamped) = clamp_cos(c);
            clamped.push(was_clamped);
            total += cc.acos();
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push_op(value, Op::CosineAngle { pred, target, clamped }))
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a single-element output with seed 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must hold one value, has shape {:?}", self.value(output).shape()),
            ));
        }
        self.backward_with_seed(output, &Tensor::full(self.value(output).shape(), 1.0))
    }

    /// Backpropagates a vector-Jacobian product seeded with `seed`.
    ///
    /// A graph can be differentiated once; a second call is rejected so
    /// gradients never accumulate twice.
    pub fn backward_with_seed(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        self.check_live()?;
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        self.backward_done = true;
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.nodes[output.0].grad.as_mut().expect("grad allocated").add_assign(seed);
        for i in (0..=output.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let grad = node.grad.as_ref().expect("grad allocated");
            backprop_node(node, grad, before);
        }
        Ok(())
    }

    /// Hash of every non-smooth branch decision taken in the forward pass
    /// (ReLU signs, pooling winners, cosine clamps). Two evaluations with
    /// equal signatures lie in the same smooth region of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::CosineAngle { clamped, .. } => {
                    i.hash(&mut h);
                    clamped.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &[f64]) -> f64 {
    dot3(a, a).sqrt()
}

fn clamp_cos(c: f64) -> (f64, bool) {
    let hi = 1.0 - COSINE_CLAMP;
    if c > hi {
        (hi, true)
    } else if c < -hi {
        (-hi, true)
    } else {
        (c, false)
    }
}

/// Adds `delta` into the gradient of `v` when it is tracked.
fn accumulate(nodes: &mut [Node], v: Var, delta: impl FnOnce(&mut [f64], &[f64])) {
    let node = &mut nodes[v.0];
    if let Some(g) = node.grad.as_mut() {
        delta(g.data_mut(), node.value.data());
    }
}

fn tracked(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop_node(node: &Node, grad: &Tensor, nodes: &mut [Node]) {
    let g = grad.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom, cols } => {
            let weight = nodes[w.0].value.data().to_vec();
            let mut dx = tracked(nodes, *x).then(|| vec![0.0; nodes[x.0].value.len()]);
            let mut dw = tracked(nodes, *w).then(|| vec![0.0; weight.len()]);
            let mut db = tracked(nodes, *b).then(|| vec![0.0; geom.out_ch]);
            kernels::conv2d_backward(geom, g, cols, &weight, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                if let Some(d) = d {
                    accumulate(nodes, v, |acc, _| add_into(acc, &d));
                }
            }
        }
        Op::MaxPool { x, argmax } => accumulate(nodes, *x, |acc, _| {
            for (&idx, gv) in argmax.iter().zip(g) {
                acc[idx] += gv;
            }
        }),
        Op::GlobalAvgPool { x } => accumulate(nodes, *x, |acc, _| {
            let plane = acc.len() / g.len();
            for (chunk, gv) in acc.chunks_mut(plane).zip(g) {
                let share = gv / plane as f64;
                chunk.iter_mut().for_each(|a| *a += share);
            }
        }),
        Op::Reshape { x } => accumulate(nodes, *x, |acc, _| add_into(acc, g)),
        Op::Dense { x, w, b } => {
            let (batch, fan_out) = (node.value.shape()[0], node.value.shape()[1]);
            let fan_in = nodes[x.0].value.len() / batch.max(1);
            if tracked(nodes, *x) {
                let weight = nodes[w.0].value.data().to_vec();
                accumulate(nodes, *x, |acc, _| {
                    kernels::gemm(batch, fan_out, fan_in, g, (fan_out, 1), &weight, (fan_in, 1), 1.0, acc, fan_in);
                });
            }
            if tracked(nodes, *w) {
                let input = nodes[x.0].value.data().to_vec();
                accumulate(nodes, *w, |acc, _| {
                    kernels::gemm(fan_out, batch, fan_in, g, (1, fan_out), &input, (fan_in, 1), 1.0, acc, fan_in);
                });
            }
            accumulate(nodes, *b, |acc, _| {
                for row in g.chunks(fan_out) {
                    add_into(acc, row);
                }
            });
        }
        Op::Relu { x } => accumulate(nodes, *x, |acc, xv| {
            for ((a, &v), gv) in acc.iter_mut().zip(xv).zip(g) {
                if v > 0.0 {
                    *a += gv;
                }
            }
        }),
        Op::Tanh { x } => {
            let y = node.value.data();
            accumulate(nodes, *x, |acc, _| {
                for ((a, yv), gv) in acc.iter_mut().zip(y).zip(g) {
                    *a += gv * (1.0 - yv * yv);
                }
            })
        }
        Op::Sigmoid { x } => {
            let y = node.value.data();
            accumulate(nodes, *x, |acc, _| {
                for ((a, yv), gv) in acc.iter_mut().zip(y).zip(g) {
                    *a += gv * yv * (1.0 - yv);
                }
            })
        }
        Op::Concat { xs } => {
            let shape = node.value.shape();
            let (batch, total, plane) = (shape[0], shape[1], shape[2] * shape[3]);
            let mut offset = 0;
            for &v in xs {
                let c = nodes[v.0].value.shape()[1];
                accumulate(nodes, v, |acc, _| {
                    for b in 0..batch {
                        let src = &g[(b * total + offset) * plane..(b * total + offset + c) * plane];
                        add_into(&mut acc[b * c * plane..(b + 1) * c * plane], src);
                    }
                });
                offset += c;
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, |acc, _| add_into(acc, g));
            accumulate(nodes, *b, |acc, _| add_into(acc, g));
        }
        Op::Scale { x, k } => accumulate(nodes, *x, |acc, _| {
            for (a, gv) in acc.iter_mut().zip(g) {
                *a += k * gv;
            }
        }),
        Op::RowSum { x } => accumulate(nodes, *x, |acc, _| {
            let cols = acc.len() / g.len().max(1);
            for (row, gv) in acc.chunks_mut(cols.max(1)).zip(g) {
                row.iter_mut().for_each(|a| *a += gv);
            }
        }),
        Op::Mse { pred, target } => {
            let n = nodes[pred.0].value.len() as f64;
            let diff: Vec<f64> = nodes[pred.0]
                .value
                .data()
                .iter()
                .zip(nodes[target.0].value.data())
                .map(|(p, t)| 2.0 * (p - t) / n * g[0])
                .collect();
            accumulate(nodes, *pred, |acc, _| add_into(acc, &diff));
            accumulate(nodes, *target, |acc, _| {
                for (a, d) in acc.iter_mut().zip(&diff) {
                    *a -= d;
                }
            });
        }
        Op::CosineAngle { pred, target, clamped } => {
            let rows = clamped.len() as f64;
            let p = nodes[pred.0].value.data().to_vec();
            let t = nodes[target.0].value.data().to_vec();
            let mut dp = vec![0.0; p.len()];
            let mut dt = vec![0.0; t.len()];
            for (r, &was_clamped) in clamped.iter().enumerate() {
                if was_clamped {
                    continue;
                }
                let (pr, tr) = (&p[3 * r..3 * r + 3], &t[3 * r..3 * r + 3]);
                let (np, nt) = (norm3(pr), norm3(tr));
                let c = dot3(pr, tr) / (np * nt);
                let dtheta = -g[0] / rows / (1.0 - c * c).sqrt();
                for i in 0..3 {
                    dp[3 * r + i] = dtheta * (tr[i] / (np * nt) - c * pr[i] / (np * np));
                    dt[3 * r + i] = dtheta * (pr[i] / (np * nt) - c * tr[i] / (nt * nt));
                }
            }
            accumulate(nodes, *pred, |acc, _| add_into(acc, &dp));
            accumulate(nodes, *target, |acc, _| add_into(acc, &dt));
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_is_sum() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), true);
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), true);
        let b = g.leaf(Tensor::zeros(&[1]), true);
        let y = g.conv2d(x, w, b, Conv2dOptions::new(1, 0, 0)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut g = Graph::new();
        let input = Tensor::from_fn(&[2, 1, 4, 5], |i| (i as f64 * 0.37).sin());
        let x = g.constant(input.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, Conv2dOptions::new(1, 0, 0)).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let w = g.constant(Tensor::zeros(&[3, 4, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.conv2d(x, w, b, Conv2dOptions::new(1, 1, 1)), Err(AutodiffError::ShapeMismatch { .. })));
        let w2 = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        // (5 + 0 - 3) / 2 + 1 is integral, (6 - 3) / 2 is not
        let x6 = g.constant(Tensor::zeros(&[1, 2, 6, 6]));
        assert!(g.conv2d(x, w2, b, Conv2dOptions::new(2, 0, 0)).is_ok());
        assert!(g.conv2d(x6, w2, b, Conv2dOptions::new(2, 0, 0)).is_err());
        let bad_bias = g.constant(Tensor::zeros(&[2]));
        assert!(g.conv2d(x, w2, bad_bias, Conv2dOptions::new(1, 1, 1)).is_err());
    }

    #[test]
    fn relu_values_and_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[-2.0, 3.0]), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
        g.backward_with_seed(y, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_splits_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 8, 3, 3]), true);
        let b = g.leaf(Tensor::zeros(&[2, 16, 3, 3]), true);
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 24, 3, 3]);
        let seed = Tensor::from_fn(&[2, 24, 3, 3], |i| i as f64);
        g.backward_with_seed(y, &seed).unwrap();
        // channel c of sample s sits at seed offset (s*24 + c)*9
        let ga = g.grad(a).unwrap();
        let gb = g.grad(b).unwrap();
        for s in 0..2 {
            for c in 0..8 {
                for p in 0..9 {
                    assert_eq!(ga.data()[(s * 8 + c) * 9 + p], ((s * 24 + c) * 9 + p) as f64);
                }
            }
            for c in 0..16 {
                for p in 0..9 {
                    assert_eq!(gb.data()[(s * 16 + c) * 9 + p], ((s * 24 + 8 + c) * 9 + p) as f64);
                }
            }
        }
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.mse(p, z).unwrap();
        assert_eq!(g.value(l).data(), &[2.5]);

        let mut g = Graph::new();
        let p = g.leaf(t(&[3], &[0.3, -1.0, 2.0]), true);
        let q = g.constant(t(&[3], &[0.3, -1.0, 2.0]));
        let l = g.mse(p, q).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        assert!(g.grad(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_angle_clamp_floor_and_orthogonal() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[3], &[0.2, 0.5, 0.9]), true);
        let q = g.constant(t(&[3], &[0.2, 0.5, 0.9]));
        let l = g.cosine_angle_loss(p, q).unwrap();
        // acos(1 - e) ~ sqrt(2e) for small e
        assert!((g.value(l).data()[0] - (2.0 * COSINE_CLAMP).sqrt()).abs() < 1e-9);

        let mut g = Graph::new();
        let p = g.leaf(t(&[3], &[1.0, 0.0, 0.0]), true);
        let q = g.constant(t(&[3], &[0.0, 1.0, 0.0]));
        let l = g.cosine_angle_loss(p, q).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);

        let mut g = Graph::new();
        let p = g.leaf(t(&[3], &[0.0, 0.0, 0.0]), true);
        let q = g.constant(t(&[3], &[0.0, 1.0, 0.0]));
        assert!(matches!(g.cosine_angle_loss(p, q), Err(AutodiffError::Degenerate { .. })));
    }

    #[test]
    fn cosine_gradient_orthogonal_to_pred() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[3], &[0.7, 0.2, 0.4]), true);
        let q = g.constant(t(&[3], &[0.3, 0.6, 0.5]));
        let l = g.cosine_angle_loss(p, q).unwrap();
        g.backward(l).unwrap();
        let d = g.grad(p).unwrap().data();
        let radial = d[0] * 0.7 + d[1] * 0.2 + d[2] * 0.4;
        assert!(radial.abs() < 1e-15);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.tanh(x).unwrap();
        g.backward(y).unwrap();
        let first = g.grad(x).unwrap().clone();
        assert_eq!(g.backward(y), Err(AutodiffError::BackwardTwice));
        assert_eq!(g.grad(x).unwrap(), &first);
        assert!(g.relu(x).is_err());
    }

    #[test]
    fn grad_allocated_iff_tracked() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0), true);
        let c = g.constant(Tensor::scalar(1.0));
        let y = g.add(x, c).unwrap();
        let z = g.scale(c, 2.0).unwrap();
        assert!(g.grad(x).is_some() && g.grad(y).is_some());
        assert!(g.grad(c).is_none() && g.grad(z).is_none());
    }

    #[test]
    fn dense_forward_matches_manual() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]));
        let w = g.constant(t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]));
        let b = g.constant(t(&[2], &[0.01, -0.02]));
        let y = g.dense(x, w, b).unwrap();
        let want = [0.1 + 0.4 + 0.9 + 0.01, -0.4 + 1.0 - 1.8 - 0.02, -0.1 + 0.1 + 0.0 + 0.01, 0.4 + 0.25 - 0.0 - 0.02];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
