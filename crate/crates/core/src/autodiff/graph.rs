use rand::Rng;

use super::kernels::{self, ConvGeometry, GateKind, Padding, PoolMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor applied before taking logs in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Train/infer switch for batch-norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running statistics owned by one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch-norm hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnOptions {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BnOptions {
    fn default() -> Self {
        BnOptions {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Pool {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    Concat(Vec<Var>),
    BroadcastMul {
        input: Var,
        gate: Var,
        kind: GateKind,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    WeightedCrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    Reshape(Var),
    Sum(Var),
    PickSum {
        input: Var,
        column: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of tensor operations recorded in execution order.
///
/// Node indices are a topological order, so backward simply walks the tape
/// in reverse. Gradients are kept for leaves only.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, `None` when the leaf does
    /// not require gradients or is disconnected from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Consumes the graph, keeping one node's value.
    pub fn into_value(mut self, var: Var) -> Tensor {
        self.nodes.swap_remove(var.0).value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.out_c] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} but kernel output channels {}", self.value(b).shape(), geom.out_c),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(geom.output_shape(), out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let needs = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, needs))
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        let (b, d, u) = match (xs, ws) {
            ([b, d], [wd, u]) if d == wd => (*b, *d, *u),
            _ => return Err(Error::shape("affine", format!("input {xs:?} · weight {ws:?}"))),
        };
        if bs != [u] {
            return Err(Error::shape("affine", format!("bias {bs:?} for {u} outputs")));
        }
        let mut out = vec![0.0; b * u];
        kernels::gemm(b, d, u, self.value(input).data(), (d, 1), self.value(weight).data(), (u, 1), &mut out, 0.0);
        let bias_v = self.value(bias).data();
        for row in out.chunks_exact_mut(u) {
            row.iter_mut().zip(bias_v).for_each(|(o, b)| *o += b);
        }
        let needs = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Tensor::new([b, u], out)?, Op::Affine { input, weight, bias }, needs))
    }

    /// Batch normalization over every axis except the trailing channel axis.
    ///
    /// In train mode the batch statistics normalize the input and `stats`
    /// is moved toward them; in infer mode `stats` is used as-is.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: Mode,
        options: BnOptions,
    ) -> Result<Var> {
        let x = self.value(input);
        let c = *x.shape().last().unwrap();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?} for {c} channels", self.value(v).shape()),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats sized for {} channels, input has {c}", stats.mean.len())));
        }
        if options.epsilon <= 0.0 {
            return Err(Error::InvalidArgument("batch_norm epsilon must be > 0".into()));
        }
        let batch_stats = mode == Mode::Train;
        let (centre, var) = if batch_stats {
            if x.shape()[0] < 2 {
                return Err(Error::InvalidArgument(
                    "batch_norm in train mode needs a batch of at least 2".into(),
                ));
            }
            let (mean, var) = kernels::channel_mean_var(x.data(), c);
            let m = options.momentum;
            for j in 0..c {
                stats.mean[j] = m * stats.mean[j] + (1.0 - m) * mean[j];
                stats.var[j] = m * stats.var[j] + (1.0 - m) * var[j];
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + options.epsilon).sqrt()).collect();
        let needs = self.any_grad(&[input, gamma, beta]);
        let (xhat, y) =
            kernels::batch_norm_apply(x.data(), &centre, &inv_std, self.value(gamma).data(), self.value(beta).data(), needs);
        let value = Tensor::new(x.shape().to_vec(), y)?;
        Ok(self.push(
            value,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats },
            needs,
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap();
        let needs = self.any_grad(&[input]);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(0.0), Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, kernels::sigmoid, Op::Sigmoid(input))
    }

    /// Row-wise softmax of a B×K tensor with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let k = match x.shape() {
            [_, k] if *k >= 2 => *k,
            s => return Err(Error::shape("softmax", format!("expected B×K with K ≥ 2, got {s:?}"))),
        };
        let value = Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.data(), k))?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), needs))
    }

    pub fn pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let dims = self.value(input).nhwc()?;
        let [b, h, w, c] = dims;
        let (out, argmax) = kernels::pool_forward(self.value(input).data(), dims, mode);
        let shape = match mode {
            PoolMode::GlobalAvg | PoolMode::GlobalMax => [b, 1, 1, c],
            PoolMode::ChannelAvg | PoolMode::ChannelMax => [b, h, w, 1],
        };
        let needs = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Pool { input, mode, argmax }, needs))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).nhwc()?;
        let [b, h, w, c] = dims;
        if h < 2 || w < 2 {
            return Err(Error::shape("avg_pool2", format!("spatial extent {h}×{w} below 2×2")));
        }
        let out = kernels::avg_pool2_forward(self.value(input).data(), dims);
        let needs = self.any_grad(&[input]);
        Ok(self.push(Tensor::new([b, h / 2, w / 2, c], out)?, Op::AvgPool2(input), needs))
    }

    /// Concatenates along the trailing channel axis in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels needs at least one input".into()))?;
        let lead = {
            let s = self.value(first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("non-channel extents {:?} differ from {:?}", &s[..s.len() - 1], lead),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let pixels: usize = lead.iter().product();
        let mut out = Vec::with_capacity(pixels * total);
        for p in 0..pixels {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[p * w..(p + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = self.any_grad(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(inputs.to_vec()), needs))
    }

    /// Multiplies by a B×1×1×C or B×H×W×1 gate repeated along its unit axes.
    pub fn broadcast_mul(&mut self, input: Var, gate: Var) -> Result<Var> {
        let dims = self.value(input).nhwc()?;
        let kind = kernels::gate_kind(&dims, self.value(gate).shape())?;
        let (x, g) = (self.value(input).data(), self.value(gate).data());
        let out = x
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[kernels::gate_index(kind, i, dims)])
            .collect();
        let needs = self.any_grad(&[input, gate]);
        Ok(self.push(Tensor::new(dims, out)?, Op::BroadcastMul { input, gate, kind }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Inverted dropout. Infer mode and `rate == 0` are the identity; in
    /// train mode each element survives with probability `1 - rate` and is
    /// scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.value(input).numel();
        let mask = if mode == Mode::Infer || rate == 0.0 {
            vec![1.0; n]
        } else {
            let scale = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                .collect()
        };
        let x = self.value(input);
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::Dropout { input, mask }, needs))
    }

    /// Mean over the batch of `w[y] · -ln(clip(p[y]))`.
    pub fn weighted_cross_entropy(&mut self, probs: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        let (b, k) = match p.shape() {
            [b, k] => (*b, *k),
            s => return Err(Error::shape("weighted_cross_entropy", format!("probabilities must be B×K, got {s:?}"))),
        };
        if labels.len() != b || weights.len() != k {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("{} labels and {} weights for {b}×{k} probabilities", labels.len(), weights.len()),
            ));
        }
        let mut loss = 0.0;
        for (row, &y) in p.data().chunks_exact(k).zip(labels) {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("probability row sums to {sum}, not 1")));
            }
            loss += weights[y] * -row[y].clamp(PROB_FLOOR, 1.0).ln();
        }
        loss /= b as f64;
        let needs = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy { probs, labels: labels.to_vec(), weights: weights.to_vec() },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let needs = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), needs)
    }

    /// Sum over the batch of column `column` of a B×K tensor.
    pub fn pick_sum(&mut self, input: Var, column: usize) -> Result<Var> {
        let x = self.value(input);
        let k = match x.shape() {
            [_, k] if column < *k => *k,
            s => return Err(Error::shape("pick_sum", format!("column {column} of {s:?}"))),
        };
        let s = x.data().chunks_exact(k).map(|r| r[column]).sum();
        let needs = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::PickSum { input, column }, needs))
    }

    /// Reverse-mode gradients of a scalar node with respect to every leaf
    /// that requires them. Nodes consumed several times accumulate the sum
    /// of their incoming gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads: out });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, index: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[index];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, contribution: Vec<f64>| add_into(&mut grads[v.0], contribution);
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { input, kernel, bias, geom } => {
                let r = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    [wants(*input), wants(*kernel), bias.is_some_and(wants)],
                );
                if let Some(d) = r.input {
                    send(*input, d);
                }
                if let Some(d) = r.kernel {
                    send(*kernel, d);
                }
                if let (Some(b), Some(d)) = (bias, r.bias) {
                    send(*b, d);
                }
            }
            Op::Affine { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (b, d) = (x.shape()[0], x.shape()[1]);
                let u = w.shape()[1];
                if wants(*input) {
                    let mut dx = vec![0.0; b * d];
                    kernels::gemm(b, u, d, g, (u, 1), w.data(), (1, u), &mut dx, 0.0);
                    send(*input, dx);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; d * u];
                    kernels::gemm(d, b, u, x.data(), (1, d), g, (u, 1), &mut dw, 0.0);
                    send(*weight, dw);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; u];
                    for row in g.chunks_exact(u) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    send(*bias, db);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let r = kernels::batch_norm_backward(g, xhat, inv_std, self.value(*gamma).data(), *batch_stats);
                if wants(*input) {
                    send(*input, r.input);
                }
                if wants(*gamma) {
                    send(*gamma, r.gamma);
                }
                if wants(*beta) {
                    send(*beta, r.beta);
                }
            }
            Op::Relu(x) => {
                let d = self.value(*x).data().iter().zip(g).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect();
                send(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.data().iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect();
                send(*x, d);
            }
            Op::Softmax(x) => {
                let k = node.value.shape()[1];
                let mut d = vec![0.0; g.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(k).zip(node.value.data().chunks_exact(k)).zip(g.chunks_exact(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, d);
            }
            Op::Pool { input, mode, argmax } => {
                let dims = self.value(*input).nhwc().unwrap();
                send(*input, kernels::pool_backward(g, dims, *mode, argmax));
            }
            Op::AvgPool2(x) => {
                let dims = self.value(*x).nhwc().unwrap();
                send(*x, kernels::avg_pool2_backward(g, dims));
            }
            Op::Concat(inputs) => {
                let widths: Vec<usize> = inputs.iter().map(|v| *self.value(*v).shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let pixels = g.len() / total;
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(&widths) {
                    if wants(v) {
                        let mut d = Vec::with_capacity(pixels * w);
                        for p in 0..pixels {
                            d.extend_from_slice(&g[p * total + offset..][..w]);
                        }
                        send(v, d);
                    }
                    offset += w;
                }
            }
            Op::BroadcastMul { input, gate, kind } => {
                let x = self.value(*input);
                let gv = self.value(*gate).data();
                let dims = x.nhwc().unwrap();
                if wants(*input) {
                    let d = g.iter().enumerate().map(|(i, gi)| gi * gv[kernels::gate_index(*kind, i, dims)]).collect();
                    send(*input, d);
                }
                if wants(*gate) {
                    let mut d = vec![0.0; gv.len()];
                    for (i, (gi, xi)) in g.iter().zip(x.data()).enumerate() {
                        d[kernels::gate_index(*kind, i, dims)] += gi * xi;
                    }
                    send(*gate, d);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Dropout { input, mask } => {
                send(*input, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::WeightedCrossEntropy { probs, labels, weights } => {
                let p = self.value(*probs);
                let k = p.shape()[1];
                let b = labels.len() as f64;
                let mut d = vec![0.0; p.numel()];
                for (i, &y) in labels.iter().enumerate() {
                    let pv = p.data()[i * k + y];
                    // the clip is flat outside [floor, 1]
                    if pv > PROB_FLOOR && pv <= 1.0 {
                        d[i * k + y] = -g[0] * weights[y] / (b * pv);
                    }
                }
                send(*probs, d);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::PickSum { input, column } => {
                let x = self.value(*input);
                let k = x.shape()[1];
                let mut d = vec![0.0; x.numel()];
                d.iter_mut().skip(*column).step_by(k).for_each(|v| *v = g[0]);
                send(*input, d);
            }
        }
    }
}
