//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its backward rule. `Tape::backward` walks the nodes in exact
//! reverse order of execution.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, PoolSpec};
use crate::tensor::{ConvSpec, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-accumulates and other arithmetic executed through a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostTally {
    pub macs: u64,
    /// Pooling, activation, normalization and elementwise ops, one per output element.
    pub other_ops: u64,
}

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm site.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
        }
    }

    /// Folds a batch's statistics into the running estimate. `count` is the
    /// number of elements per channel; the stored variance is unbiased.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        let correction = if stats.count > 1 {
            T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = keep * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * stats.var[c] * correction;
        }
    }
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Outcome flags of a cross-entropy evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CeInfo {
    pub scored: usize,
    /// Every position carried the ignore label; the loss is 0.
    pub all_ignored: bool,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    AvgPool {
        input: Var,
        spec: PoolSpec,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Bilinear {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
    },
    Sum {
        input: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<u8>,
        ignore_index: u8,
        count: usize,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Ordered record of executed ops. When recording is disabled values are
/// still kept so later ops can read them, but no backward state is saved.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    tally: CostTally,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            tally: CostTally::default(),
        }
    }

    /// A tape for pure inference: no backward state is retained.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tally(&self) -> CostTally {
        self.tally
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an input. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf_shared(Arc::new(tensor))
    }

    pub fn leaf_shared(&mut self, tensor: Arc<Tensor<T>>) -> Var {
        let requires_grad = self.recording && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let x = self.value(input);
        let out = kernels::conv2d_forward(x, self.value(weight), bias.map(|b| self.value(b)), spec)?;
        let (n, co, oh, ow) = out.dims4()?;
        self.tally.macs += (n * co * oh * ow * (spec.in_channels / spec.groups) * spec.kernel_h * spec.kernel_w) as u64;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec: *spec,
            },
            &parents,
            "conv2d",
        )
    }

    /// Per-channel `kernel`×`kernel` convolution followed by a 1×1 channel mix.
    /// `dw_weight` is C×1×k×k, `pw_weight` is O×C×1×1.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise_separable_conv(
        &mut self,
        input: Var,
        dw_weight: Var,
        pw_weight: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let channels = self.value(input).dims4()?.1;
        let out_channels = self.shape(pw_weight)[0];
        let (dw, pw) = separable_specs(channels, out_channels, kernel, stride, padding, bias.is_some());
        let mid = self.conv2d(input, dw_weight, None, &dw)?;
        self.conv2d(mid, pw_weight, bias, &pw)
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let spec = PoolSpec::new(kernel, stride, padding);
        let out = kernels::avg_pool2d_forward(self.value(input), &spec)?;
        self.tally.other_ops += out.numel() as u64;
        self.push(out, Op::AvgPool { input, spec }, &[input], "avg_pool2d")
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let spec = PoolSpec::new(kernel, stride, padding);
        let (out, argmax) = kernels::max_pool2d_forward(self.value(input), &spec)?;
        self.tally.other_ops += out.numel() as u64;
        self.push(out, Op::MaxPool { input, argmax }, &[input], "max_pool2d")
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_forward(self.value(input), out_h, out_w)?;
        self.tally.macs += 4 * out.numel() as u64;
        self.push(out, Op::Bilinear { input }, &[input], "bilinear_resize")
    }

    /// Batch norm. Train mode normalizes with batch statistics and folds them
    /// into `state`; eval mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: BnMode,
        eps: f64,
    ) -> Result<Var> {
        match mode {
            BnMode::Train => {
                let (out, stats) = self.batch_norm_train(input, gamma, beta, eps)?;
                state.update(&stats);
                Ok(out)
            }
            BnMode::Eval => self.batch_norm_eval(input, gamma, beta, state, eps),
        }
    }

    /// Train-mode batch norm; returns the batch statistics for the caller to
    /// fold into its running state.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        self.check_channel_params(c, &[gamma, beta])?;
        let (mean, var) = kernels::channel_stats(x)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let (scale, shift) = affine_terms(self.value(gamma).data(), self.value(beta).data(), &mean, &inv_std);
        let out = kernels::channel_affine(self.value(input), &scale, &shift)?;
        self.tally.other_ops += out.numel() as u64;
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count: n * h * w,
        };
        let var = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[input, gamma, beta],
            "batch_norm",
        )?;
        Ok((var, stats))
    }

    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, state: &BnState<T>, eps: f64) -> Result<Var> {
        let c = self.value(input).dims4()?.1;
        self.check_channel_params(c, &[gamma, beta])?;
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch norm state for {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let inv_std: Vec<T> = state
            .running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let mean = state.running_mean.clone();
        let (scale, shift) = affine_terms(self.value(gamma).data(), self.value(beta).data(), &mean, &inv_std);
        let out = kernels::channel_affine(self.value(input), &scale, &shift)?;
        self.tally.other_ops += out.numel() as u64;
        self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[input, gamma, beta],
            "batch_norm",
        )
    }

    fn check_channel_params(&self, c: usize, params: &[Var]) -> Result<()> {
        for &p in params {
            if self.shape(p) != [c] {
                return Err(Error::Shape(format!(
                    "per-channel parameter of shape {:?} for {c} channels",
                    self.shape(p)
                )));
            }
        }
        Ok(())
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.tally.other_ops += out.numel() as u64;
        self.push(out, Op::Relu { input }, &[input], "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.tally.other_ops += out.numel() as u64;
        self.push(out, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.tally.other_ops += out.numel() as u64;
        self.push(out, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let x = self.value(input);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v * factor).collect())?;
        self.tally.other_ops += out.numel() as u64;
        self.push(out, Op::Scale { input, factor }, &[input], "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::new(&[1], vec![total])?, Op::Sum { input }, &[input], "sum")
    }

    /// Stacks inputs along the channel axis, preserving order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(v)
                )));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
            "concat_channels",
        )
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            data.extend_from_slice(&x[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let out = Tensor::new(&[n, len, h, w], data)?;
        self.push(out, Op::Slice { input, start }, &[input], "slice_channels")
    }

    /// Mean softmax cross entropy over positions whose target differs from
    /// `ignore_index`; `targets` is N×H×W row-major.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u8], ignore_index: u8) -> Result<(Var, CeInfo)> {
        let (loss, probs, count) = kernels::softmax_cross_entropy_forward(self.value(logits), targets, ignore_index)?;
        let out = Tensor::new(&[1], vec![loss])?;
        let var = self.push(
            out,
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
                ignore_index,
                count,
            },
            &[logits],
            "softmax_cross_entropy",
        )?;
        Ok((
            var,
            CeInfo {
                scored: count,
                all_ignored: count == 0,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Back-propagates from a single-element `output` with seed gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(output)
            )));
        }
        self.backward_with(output, vec![T::one()])
    }

    /// Back-propagates an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::Shape("seed gradient does not match output".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, contribution) in self.backward_node(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                debug_assert_eq!(g.len(), node.value.numel());
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let want_bias = bias.is_some_and(rg);
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    spec,
                    g,
                    rg(*input),
                    rg(*weight),
                    want_bias,
                )?;
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    out.push((*b, db));
                }
            }
            Op::AvgPool { input, spec } => {
                out.push((*input, kernels::avg_pool2d_backward(self.shape(*input), spec, g)?));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*input, dx));
            }
            Op::Bilinear { input } => {
                let (_, _, oh, ow) = node.value.dims4()?;
                out.push((*input, kernels::bilinear_backward(self.shape(*input), oh, ow, g)?));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let m = T::from_usize(n * hw);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for (&xv, &gv) in x.data()[range.clone()].iter().zip(&g[range]) {
                            dbeta[ch] += gv;
                            dgamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if rg(*input) {
                    let mut dx = vec![T::zero(); x.numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / m;
                            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for ((d, &xv), &gv) in dx[range.clone()]
                                .iter_mut()
                                .zip(&x.data()[range.clone()])
                                .zip(&g[range])
                            {
                                let xhat = (xv - mean[ch]) * inv_std[ch];
                                *d = k * (m * gv - dbeta[ch] - xhat * dgamma[ch]);
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); x.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        let s = gam[ch] * inv_std[ch];
                        let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for ((d, &xv), &gv) in dx[range.clone()]
                            .iter_mut()
                            .zip(&x.data()[range.clone()])
                            .zip(&g[range])
                        {
                            dbeta[ch] += gv;
                            dgamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                            *d = gv * s;
                        }
                    }
                }
                out.push((*input, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu { input } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()));
                out.push((*b, g.iter().zip(x).map(|(&gv, &xv)| gv * xv).collect()));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|&gv| gv * *factor).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.value(*input).numel()]));
            }
            Op::Concat { inputs } => {
                let (n, total_c, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    let mut dx = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        dx.extend_from_slice(&g[(b * total_c + offset) * hw..(b * total_c + offset + c) * hw]);
                    }
                    offset += c;
                    out.push((v, dx));
                }
            }
            Op::Slice { input, start } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    dx[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                }
                out.push((*input, dx));
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                ignore_index,
                count,
            } => {
                let (n, k, h, w) = self.value(*logits).dims4()?;
                let hw = h * w;
                let mut dz = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let s = g[0] / T::from_usize(*count);
                    for b in 0..n {
                        for pos in 0..hw {
                            let t = targets[b * hw + pos];
                            if t == *ignore_index {
                                continue;
                            }
                            for ch in 0..k {
                                let idx = (b * k + ch) * hw + pos;
                                let onehot = if ch == t as usize { T::one() } else { T::zero() };
                                dz[idx] = (probs[idx] - onehot) * s;
                            }
                        }
                    }
                }
                out.push((*logits, dz));
            }
        }
        Ok(out)
    }
}

/// Specs for the depthwise and pointwise stages of a separable conv.
pub fn separable_specs(
    channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    has_bias: bool,
) -> (ConvSpec, ConvSpec) {
    (
        ConvSpec::new(channels, channels, kernel, stride, padding).with_groups(channels),
        ConvSpec::new(channels, out_channels, 1, 1, 0).with_bias(has_bias),
    )
}

fn affine_terms<T: Real>(gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
    let scale: Vec<T> = gamma.iter().zip(inv_std).map(|(&g, &s)| g * s).collect();
    let shift = beta
        .iter()
        .zip(mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

// ── Gradient checking ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_per_input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Central-difference gradient check of `sum(f(inputs))` with the default
/// step 1e-5.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            tolerance,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let total = tape.sum(out)?;
    let grads = tape.backward(total)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<Vec<f64>> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().to_vec())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grad_check"));
        }
        let numel = inputs[i].numel();
        let stride = match opts.max_per_input {
            Some(max) if max > 0 && numel > max => numel.div_ceil(max),
            _ => 1,
        };
        for e in (0..numel).step_by(stride) {
            let x0 = inputs[i].data()[e];
            let (xp, xm) = (x0 + opts.step, x0 - opts.step);
            work[i].data_mut()[e] = xp;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = xm;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = x0;
            // Summing per-element differences keeps the common terms from
            // swamping the difference quotient.
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            let numeric = diff / (xp - xm);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("grad_check"));
            }
            let abs = (analytic[e] - numeric).abs();
            let rel = abs / analytic[e].abs().max(numeric.abs()).max(opts.abs_floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}
