//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its value and what is needed to
//! propagate gradients. Nodes are created in topological order, so
//! [`Graph::backward`] walks them in reverse. The graph is consumed by
//! `backward`; a fresh one is built for every step.

use super::conv::{self, ConvShape};
use super::ops::{self, bce_logit_term, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f32),
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean and variance used by batch normalization in
/// eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub initialized: bool,
}

impl RunningStats {
    /// Statistics that have never seen a batch; eval mode rejects them.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance, usable in eval mode immediately.
    pub fn standard(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        shape: ConvShape,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        shape: ConvShape,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Act(Var, Activation),
    Bce {
        logits: Var,
        targets: Tensor,
    },
    L1 {
        pred: Var,
        target: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Act(_, a) => a.name(),
            Op::Bce { .. } => "bce_with_logits",
            Op::L1 { .. } => "l1_loss",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        let value = value.finite_or(op.name())?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb, "operands must have identical shapes"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = ops::zip(self.value(a), self.value(b), |x, y| x + y);
        self.record(v, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = ops::zip(self.value(a), self.value(b), |x, y| x * y);
        self.record(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let v = ops::map(self.value(a), |x| x * factor);
        self.record(v, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum_f64() as f32);
        self.record(v, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape).map_err(|_| {
            Error::shape("reshape", self.value(a).shape(), shape, "element counts differ")
        })?;
        self.record(v, Op::Reshape(a), &[a])
    }

    /// Concatenates along axis 1 (channels). All other extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.value(first).shape().to_vec();
        if base.len() < 2 {
            return Err(Error::invalid("concat", format!("rank {} has no channel axis", base.len())));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape("concat", &base, s, "only the channel extent may differ"));
            }
            channels += s[1];
        }
        let (outer, _, inner) = ops::channel_view(&base);
        let mut data = Vec::with_capacity(outer * channels * inner);
        for n in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let v = Tensor { shape, data };
        self.record(v, Op::Concat(parts.to_vec()), parts)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let shape = conv::conv2d_shape(x, k, b, stride, pad)?;
        let v = conv::conv2d_forward(&shape, x, k, b);
        self.record(v, Op::Conv2d { input, kernel, bias, shape }, &[input, kernel, bias])
    }

    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let shape = conv::conv_transpose2d_shape(x, k, b, stride, pad)?;
        let v = conv::conv_transpose2d_forward(&shape, x, k, b);
        self.record(v, Op::ConvTranspose2d { input, kernel, bias, shape }, &[input, kernel, bias])
    }

    /// Batch normalization over every axis except channels. Train mode
    /// normalizes with batch statistics and folds them into `stats`;
    /// eval mode uses `stats` and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
        eps: f32,
        momentum: f32,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid(OP, format!("eps must be positive, got {eps}")));
        }
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(Error::invalid(OP, format!("expected a channel axis, got shape {:?}", x.shape())));
        }
        let c = x.shape()[1];
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(OP, x.shape(), self.value(v).shape(), format!("{what} must have shape [{c}]")));
            }
        }
        if stats.channels() != c {
            return Err(Error::shape(OP, x.shape(), &[stats.channels()], "running statistics channel count"));
        }
        let count = x.len() / c;
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BatchNormMode::Train => {
                let sums = ops::channel_sums(x, |_, v| v as f64);
                let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
                let (_, _, inner) = ops::channel_view(x.shape());
                let sq = ops::channel_sums(x, |i, v| {
                    let d = v as f64 - mean[(i / inner) % c];
                    d * d
                });
                let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
                let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
                let m = momentum as f64;
                for ch in 0..c {
                    stats.mean[ch] = ((1.0 - m) * stats.mean[ch] as f64 + m * mean[ch]) as f32;
                    stats.var[ch] = ((1.0 - m) * stats.var[ch] as f64 + m * var[ch] * unbias) as f32;
                }
                stats.initialized = true;
                (
                    mean.iter().map(|&v| v as f32).collect(),
                    var.iter().map(|&v| v as f32).collect(),
                )
            }
            BatchNormMode::Eval => {
                if !stats.initialized {
                    return Err(Error::UninitializedStats);
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| ((v as f64 + eps as f64).sqrt().recip()) as f32).collect();
        let normalized = ops::map_channels(x, |ch, _, v| (v - mean[ch]) * inv_std[ch]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = ops::map_channels(&normalized, |ch, _, v| g[ch] * v + b[ch]);
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
            batch_stats: mode == BatchNormMode::Train,
        };
        self.record(out, op, &[input, gamma, beta])
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let v = ops::map(self.value(input), |x| kind.apply(x));
        self.record(v, Op::Act(input, kind), &[input])
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Result<Var> {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Mean binary cross-entropy of `logits` against fixed `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        const OP: &str = "bce_with_logits";
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(OP, z.shape(), targets.shape(), "logits and targets must match"));
        }
        if let Some(t) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(OP, format!("target {t} outside [0, 1]")));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| bce_logit_term(z as f64, t as f64))
            .sum();
        let v = Tensor::scalar((total / z.len() as f64) as f32);
        self.record(v, Op::Bce { logits, targets: targets.clone() }, &[logits])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let total: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        let v = Tensor::scalar((total / p.len() as f64) as f32);
        self.record(v, Op::L1 { pred, target }, &[pred, target])
    }

    /// Propagates gradients from a scalar `loss` back to every leaf that
    /// requires them, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_from(loss, Tensor::ones(&shape))
    }

    /// Vector-Jacobian product: backpropagates `seed` from `output`.
    pub fn backward_from(mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward", self.value(output).shape(), seed.shape(), "seed gradient shape"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (parent, pg) in self.parent_grads(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Intermediate values are no longer needed.
            self.nodes[i].value = Tensor::scalar(0.0);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn parent_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, ops::zip(g, self.value(*b), |g, y| g * y)),
                (*b, ops::zip(g, self.value(*a), |g, x| g * x)),
            ],
            Op::Scale(a, f) => vec![(*a, ops::map(g, |g| g * f))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.item()))],
            Op::Reshape(a) => vec![(*a, Tensor { shape: self.value(*a).shape().to_vec(), data: g.data().to_vec() })],
            Op::Concat(parts) => {
                let (outer, total, inner) = ops::channel_view(g.shape());
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let shape = self.value(p).shape().to_vec();
                        let c = shape[1];
                        let mut data = Vec::with_capacity(outer * c * inner);
                        for n in 0..outer {
                            let start = (n * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        offset += c;
                        (p, Tensor { shape, data })
                    })
                    .collect()
            }
            Op::Conv2d { input, kernel, bias, shape } => {
                let (dx, dk, db) = conv::conv2d_backward(
                    shape,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                let mut out = vec![(*bias, db)];
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
                out
            }
            Op::ConvTranspose2d { input, kernel, bias, shape } => {
                let (dx, dk, db) = conv::conv_transpose2d_backward(
                    shape,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                let mut out = vec![(*bias, db)];
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
                out
            }
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, batch_stats } => {
                let c = g.shape()[1];
                let dbeta = ops::channel_sums(g, |_, v| v as f64);
                let dgamma = ops::channel_sums(g, |i, v| v as f64 * normalized.data()[i] as f64);
                let gm = self.value(*gamma).data();
                let dx = if *batch_stats {
                    let m = (g.len() / c) as f64;
                    ops::map_channels(g, |ch, i, dy| {
                        let xh = normalized.data()[i] as f64;
                        let v = gm[ch] as f64 * inv_std[ch] as f64 / m
                            * (m * dy as f64 - dbeta[ch] - xh * dgamma[ch]);
                        v as f32
                    })
                } else {
                    ops::map_channels(g, |ch, _, dy| dy * gm[ch] * inv_std[ch])
                };
                vec![
                    (*input, dx),
                    (*gamma, Tensor { shape: vec![c], data: dgamma.iter().map(|&v| v as f32).collect() }),
                    (*beta, Tensor { shape: vec![c], data: dbeta.iter().map(|&v| v as f32).collect() }),
                ]
            }
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                vec![(*a, Tensor { shape: x.shape().to_vec(), data })]
            }
            Op::Bce { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / z.len() as f32;
                vec![(*logits, ops::zip(z, targets, |z, t| (sigmoid(z) - t) * scale))]
            }
            Op::L1 { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g.item() / p.len() as f32;
                let dp = ops::zip(p, t, |a, b| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        0.0
                    }
                });
                let dt = ops::map(&dp, |v| -v);
                vec![(*pred, dp), (*target, dt)]
            }
        }
    }
}

/// Gradients of leaf nodes after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if it did not require gradients or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
