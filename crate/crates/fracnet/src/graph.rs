//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Graph`] records every forward operation in topological (creation)
//! order together with whatever context its backward needs. [`Graph::backward`]
//! walks the tape once in reverse, accumulates gradients for every node that
//! requires them, and marks the graph consumed; a second backward is rejected.
//!
//! All reductions sum sequentially in row-major order, so forward and backward
//! are bit-deterministic for fixed inputs.

#![allow(clippy::needless_range_loop)]

use crate::params::{ParamId, Params};
use crate::rng::SplitMix64;
use crate::tensor::{conv_out_extent, Scalar, Tensor, TensorError};

pub type NodeId = usize;

/// Whether batch statistics and dropout masks are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// Batch-norm forward result: the output node plus, in train mode, the
/// updated (running_mean, running_var).
pub type BatchNormOutput<E> = (NodeId, Option<(Vec<E>, Vec<E>)>);

#[derive(Debug, Clone)]
struct BnCtx<E> {
    // Per-channel statistics actually used for normalization.
    mean: Vec<E>,
    inv_std: Vec<E>,
}

#[derive(Debug)]
enum Op<E> {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        ctx: BnCtx<E>,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        softmax: Vec<E>,
        targets: Vec<E>,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    BroadcastTo {
        input: NodeId,
        src_shape: Vec<usize>,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    Reshape {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<E>,
    },
    Scale {
        input: NodeId,
        factor: E,
    },
    Sum {
        input: NodeId,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Gradient buffers produced by one backward pass, indexed by leaf node id.
#[derive(Debug)]
pub struct Gradients<E> {
    node_grads: Vec<Option<Vec<E>>>,
    param_leaves: Vec<(NodeId, ParamId)>,
}

impl<E: Scalar> Gradients<E> {
    pub fn node(&self, id: NodeId) -> Option<&[E]> {
        self.node_grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take_node(&mut self, id: NodeId) -> Option<Vec<E>> {
        self.node_grads.get_mut(id).and_then(|g| g.take())
    }

    /// Adds every parameter-leaf gradient into the store's gradient slots.
    pub fn accumulate_into(&self, params: &mut Params<E>) {
        for &(node, pid) in &self.param_leaves {
            if let Some(g) = self.node_grads[node].as_deref() {
                params.accumulate_grad(pid, g);
            }
        }
    }
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Records an input tensor; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> NodeId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf { param: None }, needs)
    }

    /// Records a constant input that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<E>) -> NodeId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf { param: None }, false)
    }

    /// Copies a parameter's current value in as a leaf. Trainable parameters
    /// receive gradients on backward.
    pub fn param(&mut self, params: &Params<E>, id: ParamId) -> NodeId {
        let tensor = params.get(id).clone();
        let needs = params.is_trainable(id);
        self.push(tensor, Op::Leaf { param: Some(id) }, needs)
    }

    // ---- forward operations -------------------------------------------------

    /// Strided, padded, dilated cross-correlation of NCHW input with OIKK
    /// kernel and optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId, TensorError> {
        let in_shape = self.value(input).shape().to_vec();
        let k_shape = self.value(kernel).shape().to_vec();
        if in_shape.len() != 4 || k_shape.len() != 4 || in_shape[1] != k_shape[1] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d input channels vs kernel",
                lhs: in_shape,
                rhs: k_shape,
            });
        }
        if k_shape[2] != k_shape[3] {
            return Err(TensorError::InvalidShape {
                shape: k_shape,
                reason: "conv2d kernels must be square".into(),
            });
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![spec.stride, spec.dilation],
                reason: "stride and dilation must be positive".into(),
            });
        }
        let (n, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (c_out, k) = (k_shape[0], k_shape[2]);
        let oh = conv_out_extent(h, k, spec.stride, spec.padding, spec.dilation);
        let ow = conv_out_extent(w, k, spec.stride, spec.padding, spec.dilation);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(TensorError::NonPositiveOutputExtent {
                    input: in_shape,
                    kernel: k_shape,
                    stride: spec.stride,
                    padding: spec.padding,
                    dilation: spec.dilation,
                })
            }
        };
        if let Some(b) = bias {
            let b_shape = self.value(b).shape().to_vec();
            if b_shape != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    context: "conv2d bias vs kernel output channels",
                    lhs: b_shape,
                    rhs: vec![c_out],
                });
            }
        }

        let mut out = vec![E::zero(); n * c_out * oh * ow];
        {
            let x = self.value(input).data();
            let ker = self.value(kernel).data();
            for ni in 0..n {
                for o in 0..c_out {
                    let out_base = (ni * c_out + o) * oh * ow;
                    if let Some(b) = bias {
                        let bv = self.value(b).data()[o];
                        out[out_base..out_base + oh * ow].fill(bv);
                    }
                    for i in 0..c_in {
                        let in_base = (ni * c_in + i) * h * w;
                        let k_base = (o * c_in + i) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wgt = ker[k_base + ky * k + kx];
                                // y such that 0 <= y*stride - padding + ky*dilation < h
                                let dy = ky as i64 * spec.dilation as i64 - spec.padding as i64;
                                let dx = kx as i64 * spec.dilation as i64 - spec.padding as i64;
                                let (y0, y1) = valid_range(oh, spec.stride, dy, h);
                                let (x0, x1) = valid_range(ow, spec.stride, dx, w);
                                if x0 >= x1 {
                                    continue;
                                }
                                for y in y0..y1 {
                                    let iy = (y as i64 * spec.stride as i64 + dy) as usize;
                                    let ix0 = (x0 as i64 * spec.stride as i64 + dx) as usize;
                                    let out_row =
                                        &mut out[out_base + y * ow + x0..out_base + y * ow + x1];
                                    if spec.stride == 1 {
                                        let in_row = &x[in_base + iy * w + ix0..];
                                        for (ov, &iv) in out_row.iter_mut().zip(in_row) {
                                            *ov = *ov + wgt * iv;
                                        }
                                    } else {
                                        let in_row =
                                            &x[in_base + iy * w + ix0..in_base + (iy + 1) * w];
                                        let taps = in_row.iter().step_by(spec.stride);
                                        for (ov, &iv) in out_row.iter_mut().zip(taps) {
                                            *ov = *ov + wgt * iv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs =
            self.needs(input) || self.needs(kernel) || bias.map(|b| self.needs(b)).unwrap_or(false);
        let value = Tensor::from_vec(&[n, c_out, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
            needs,
        ))
    }

    /// Per-channel batch normalization over (N, H, W) of an NCHW tensor.
    ///
    /// Train mode normalizes by biased batch statistics and returns the
    /// updated running statistics (exponential moving average with the given
    /// momentum); eval mode normalizes by the provided running statistics and
    /// returns `None`. Fresh running statistics are mean 0, variance 1.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[E],
        running_var: &[E],
        mode: Mode,
        momentum: f64,
        epsilon: f64,
    ) -> Result<BatchNormOutput<E>, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "batch_norm expects NCHW".into(),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for (name, node) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(node).shape().to_vec();
            if s != [c] {
                return Err(TensorError::ShapeMismatch {
                    context: match name {
                        "gamma" => "batch_norm gamma vs channels",
                        _ => "batch_norm beta vs channels",
                    },
                    lhs: s,
                    rhs: vec![c],
                });
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                context: "batch_norm running stats vs channels",
                lhs: vec![running_mean.len(), running_var.len()],
                rhs: vec![c],
            });
        }
        if epsilon <= 0.0 {
            return Err(TensorError::InvalidShape {
                shape: vec![],
                reason: "batch_norm epsilon must be positive".into(),
            });
        }

        let m = (n * h * w) as f64;
        let eps = E::from_f64(epsilon);
        let plane = h * w;
        let (mean, var): (Vec<E>, Vec<E>) = match mode {
            Mode::Train => {
                let x = self.value(input).data();
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for ci in 0..c {
                    let mut acc = E::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            acc = acc + x[base + p];
                        }
                    }
                    mean[ci] = acc / E::from_f64(m);
                    let mut acc2 = E::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            let d = x[base + p] - mean[ci];
                            acc2 = acc2 + d * d;
                        }
                    }
                    var[ci] = acc2 / E::from_f64(m);
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };

        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let mut out = vec![E::zero(); n * c * plane];
        {
            let x = self.value(input).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (mu, is, gv, bv) = (mean[ci], inv_std[ci], g[ci], b[ci]);
                    for p in 0..plane {
                        out[base + p] = (x[base + p] - mu) * is * gv + bv;
                    }
                }
            }
        }

        let updated = match mode {
            Mode::Train => {
                let mom = E::from_f64(momentum);
                let keep = E::from_f64(1.0 - momentum);
                let new_mean: Vec<E> = running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| keep * r + mom * b)
                    .collect();
                let new_var: Vec<E> = running_var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| keep * r + mom * b)
                    .collect();
                Some((new_mean, new_var))
            }
            Mode::Eval => None,
        };

        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::from_vec(&shape, out)?;
        let id = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ctx: BnCtx { mean, inv_std },
            },
            needs,
        );
        Ok((id, updated))
    }

    /// Square max pooling. Padded positions never win; ties resolve to the
    /// first contributing input index in row-major order.
    pub fn max_pool(
        &mut self,
        input: NodeId,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "max_pool expects NCHW".into(),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if window == 0 || stride == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![window, stride],
                reason: "window and stride must be positive".into(),
            });
        }
        if window > h + 2 * padding || window > w + 2 * padding {
            return Err(TensorError::WindowTooLarge {
                window,
                extent: h.min(w) + 2 * padding,
            });
        }
        let oh = (h + 2 * padding - window) / stride + 1;
        let ow = (w + 2 * padding - window) / stride + 1;
        let mut out = vec![E::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        {
            let x = self.value(input).data();
            for ni in 0..n {
                for ci in 0..c {
                    let in_base = (ni * c + ci) * h * w;
                    let out_base = (ni * c + ci) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best: Option<(E, usize)> = None;
                            for ky in 0..window {
                                let iy = oy as i64 * stride as i64 + ky as i64 - padding as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..window {
                                    let ix = ox as i64 * stride as i64 + kx as i64 - padding as i64;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let idx = in_base + iy as usize * w + ix as usize;
                                    let v = x[idx];
                                    match best {
                                        Some((bv, _)) if v <= bv => {}
                                        _ => best = Some((v, idx)),
                                    }
                                }
                            }
                            // Window always overlaps the input because
                            // window <= extent + 2*padding.
                            let (v, idx) = best.expect("window overlaps input");
                            out[out_base + oy * ow + ox] = v;
                            argmax[out_base + oy * ow + ox] = idx;
                        }
                    }
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, needs))
    }

    /// Mean over the spatial plane per (n, c); output is N x C x 1 x 1.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "global_avg_pool expects NCHW".into(),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let scale = E::from_f64(1.0 / plane as f64);
        let mut out = vec![E::zero(); n * c];
        {
            let x = self.value(input).data();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let mut acc = E::zero();
                    for p in 0..plane {
                        acc = acc + x[base + p];
                    }
                    out[ni * c + ci] = acc * scale;
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::from_vec(&[n, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, needs))
    }

    /// Affine map: (N x F) @ (F x G) + bias(G).
    pub fn dense(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let x_shape = self.value(input).shape().to_vec();
        let w_shape = self.value(weight).shape().to_vec();
        if x_shape.len() != 2 || w_shape.len() != 2 || x_shape[1] != w_shape[0] {
            return Err(TensorError::ShapeMismatch {
                context: "dense input vs weight",
                lhs: x_shape,
                rhs: w_shape,
            });
        }
        let (n, f, g) = (x_shape[0], x_shape[1], w_shape[1]);
        let b_shape = self.value(bias).shape().to_vec();
        if b_shape != [g] {
            return Err(TensorError::ShapeMismatch {
                context: "dense bias vs weight columns",
                lhs: b_shape,
                rhs: vec![g],
            });
        }
        let mut out = vec![E::zero(); n * g];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for r in 0..n {
                out[r * g..(r + 1) * g].copy_from_slice(b);
                for k in 0..f {
                    let xv = x[r * f + k];
                    if xv == E::zero() {
                        continue;
                    }
                    let w_row = &wt[k * g..(k + 1) * g];
                    let out_row = &mut out[r * g..(r + 1) * g];
                    for j in 0..g {
                        out_row[j] = out_row[j] + xv * w_row[j];
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::from_vec(&[n, g], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Elementwise max(x, 0). The derivative at exactly 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self
            .value(input)
            .map(|v| if v > E::zero() { v } else { E::zero() });
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    /// Elementwise logistic function; output lies strictly in (0, 1) for
    /// finite inputs that do not saturate the element type.
    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self
            .value(input)
            .map(|v| E::one() / (E::one() + (-v).exp()));
        let needs = self.needs(input);
        self.push(value, Op::Sigmoid { input }, needs)
    }

    /// Mean over the batch of -log softmax probability of the one-hot target
    /// class, stabilized by max subtraction. Scalar output.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &Tensor<E>,
    ) -> Result<NodeId, TensorError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "softmax_cross_entropy expects N x K logits".into(),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        if k < 2 {
            return Err(TensorError::TooFewClasses(k));
        }
        if targets.shape() != [n, k] {
            return Err(TensorError::ShapeMismatch {
                context: "softmax_cross_entropy targets vs logits",
                lhs: targets.shape().to_vec(),
                rhs: vec![n, k],
            });
        }
        for r in 0..n {
            let row = &targets.data()[r * k..(r + 1) * k];
            let ones = row.iter().filter(|&&v| v == E::one()).count();
            let zeros = row.iter().filter(|&&v| v == E::zero()).count();
            if ones != 1 || zeros != k - 1 {
                return Err(TensorError::MalformedOneHot { row: r });
            }
        }

        let mut softmax = vec![E::zero(); n * k];
        let mut loss = E::zero();
        {
            let z = self.value(logits).data();
            for r in 0..n {
                let row = &z[r * k..(r + 1) * k];
                let mut max = row[0];
                for &v in row.iter().skip(1) {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = E::zero();
                for (c, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    softmax[r * k + c] = e;
                    sum = sum + e;
                }
                let log_sum = sum.ln();
                for c in 0..k {
                    softmax[r * k + c] = softmax[r * k + c] / sum;
                    if targets.data()[r * k + c] == E::one() {
                        loss = loss - (row[c] - max - log_sum);
                    }
                }
            }
        }
        loss = loss / E::from_f64(n as f64);
        let needs = self.needs(logits);
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                softmax,
                targets: targets.data().to_vec(),
            },
            needs,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<E> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::Add { lhs, rhs }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<E> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::Mul { lhs, rhs }, needs))
    }

    /// Expands dimensions of extent 1 by repetition to the target shape.
    pub fn broadcast_to(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let src_shape = self.value(input).shape().to_vec();
        if src_shape.len() != shape.len()
            || src_shape.iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(TensorError::ShapeMismatch {
                context: "broadcast_to",
                lhs: src_shape,
                rhs: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![E::zero(); numel];
        {
            let x = self.value(input).data();
            let strides = broadcast_strides(&src_shape, shape);
            let mut coords = vec![0usize; shape.len()];
            let mut src = 0usize;
            for slot in out.iter_mut() {
                *slot = x[src];
                advance(&mut coords, &mut src, shape, &strides);
            }
        }
        let needs = self.needs(input);
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::BroadcastTo { input, src_shape }, needs))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!inputs.is_empty(), "concat needs at least one input");
        let first = self.value(inputs[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(TensorError::InvalidShape {
                shape: first,
                reason: "concat_channels expects NCHW".into(),
            });
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch {
                    context: "concat_channels",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut out = vec![E::zero(); n * c_total * plane];
        for ni in 0..n {
            let mut c_off = 0;
            for &id in inputs {
                let s = self.value(id).shape();
                let ci = s[1];
                let src = self.value(id).data();
                let src_base = ni * ci * plane;
                let dst_base = (ni * c_total + c_off) * plane;
                out[dst_base..dst_base + ci * plane]
                    .copy_from_slice(&src[src_base..src_base + ci * plane]);
                c_off += ci;
            }
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        let value = Tensor::from_vec(&[n, c_total, h, w], out)?;
        Ok(self.push(
            value,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.value(input).reshaped(shape)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    /// Inverted dropout: keeps each element with probability 1 - p and scales
    /// survivors by 1/(1 - p). Identity when p = 0.
    pub fn dropout(&mut self, input: NodeId, p: f64, rng: &mut SplitMix64) -> NodeId {
        debug_assert!((0.0..1.0).contains(&p));
        let numel = self.value(input).numel();
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..numel)
            .map(|_| {
                if p > 0.0 && rng.next_f64() < p {
                    E::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data: Vec<E> = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::from_vec(self.value(input).shape(), data).expect("dropout shape");
        let needs = self.needs(input);
        self.push(value, Op::Dropout { input, mask }, needs)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: NodeId, factor: E) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    /// Full reduction to a scalar, summing sequentially in row-major order.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let mut acc = E::zero();
        for &v in self.value(input).data() {
            acc = acc + v;
        }
        let needs = self.needs(input);
        self.push(Tensor::scalar(acc), Op::Sum { input }, needs)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse accumulation from a scalar loss. Consumes the graph: a second
    /// call is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<E>, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![E::one()]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads);
        }

        let param_leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } if n.needs_grad => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            node_grads: grads,
            param_leaves,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], target: NodeId, delta: &[E]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let numel = self.nodes[target].value.numel();
        debug_assert_eq!(delta.len(), numel);
        let slot = grads[target].get_or_insert_with(|| vec![E::zero(); numel]);
        for (s, &d) in slot.iter_mut().zip(delta) {
            *s = *s + d;
        }
    }

    fn backward_op(&self, id: NodeId, g: &[E], grads: &mut [Option<Vec<E>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let in_shape = self.value(*input).shape();
                let k_shape = self.value(*kernel).shape();
                let out_shape = self.value(id).shape();
                let (n, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (c_out, k) = (k_shape[0], k_shape[2]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let x = self.value(*input).data();
                let ker = self.value(*kernel).data();
                let mut gx = vec![E::zero(); x.len()];
                let mut gk = vec![E::zero(); ker.len()];
                let mut gb = vec![E::zero(); c_out];
                for ni in 0..n {
                    for o in 0..c_out {
                        let out_base = (ni * c_out + o) * oh * ow;
                        for i in 0..c_in {
                            let in_base = (ni * c_in + i) * h * w;
                            let k_base = (o * c_in + i) * k * k;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let dy = ky as i64 * spec.dilation as i64 - spec.padding as i64;
                                    let dx = kx as i64 * spec.dilation as i64 - spec.padding as i64;
                                    let (y0, y1) = valid_range(oh, spec.stride, dy, h);
                                    let (x0, x1) = valid_range(ow, spec.stride, dx, w);
                                    if x0 >= x1 {
                                        continue;
                                    }
                                    let wgt = ker[k_base + ky * k + kx];
                                    let mut wacc = E::zero();
                                    for y in y0..y1 {
                                        let iy = (y as i64 * spec.stride as i64 + dy) as usize;
                                        let ix0 = (x0 as i64 * spec.stride as i64 + dx) as usize;
                                        let g_row =
                                            &g[out_base + y * ow + x0..out_base + y * ow + x1];
                                        if spec.stride == 1 {
                                            let gx_row = &mut gx[in_base + iy * w + ix0
                                                ..in_base + iy * w + ix0 + (x1 - x0)];
                                            let x_row = &x[in_base + iy * w + ix0
                                                ..in_base + iy * w + ix0 + (x1 - x0)];
                                            for ((gxv, &xv), &gv) in
                                                gx_row.iter_mut().zip(x_row).zip(g_row)
                                            {
                                                *gxv = *gxv + gv * wgt;
                                                wacc = wacc + gv * xv;
                                            }
                                        } else {
                                            let row0 = in_base + iy * w + ix0;
                                            let row1 = in_base + (iy + 1) * w;
                                            let gx_taps =
                                                gx[row0..row1].iter_mut().step_by(spec.stride);
                                            let x_taps = x[row0..row1].iter().step_by(spec.stride);
                                            for ((gxv, &xv), &gv) in gx_taps.zip(x_taps).zip(g_row)
                                            {
                                                *gxv = *gxv + gv * wgt;
                                                wacc = wacc + gv * xv;
                                            }
                                        }
                                    }
                                    gk[k_base + ky * k + kx] = gk[k_base + ky * k + kx] + wacc;
                                }
                            }
                        }
                        if bias.is_some() {
                            let mut acc = E::zero();
                            for p in 0..oh * ow {
                                acc = acc + g[out_base + p];
                            }
                            gb[o] = gb[o] + acc;
                        }
                    }
                }
                self.accumulate(grads, *input, &gx);
                self.accumulate(grads, *kernel, &gk);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ctx,
            } => {
                let shape = self.value(*input).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let m = E::from_f64((n * plane) as f64);
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                // First pass: per-channel sums of g and g * x_hat.
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (mu, is) = (ctx.mean[ci], ctx.inv_std[ci]);
                        let mut sg = E::zero();
                        let mut sgx = E::zero();
                        for p in 0..plane {
                            let gv = g[base + p];
                            sg = sg + gv;
                            sgx = sgx + gv * (x[base + p] - mu) * is;
                        }
                        dbeta[ci] = dbeta[ci] + sg;
                        dgamma[ci] = dgamma[ci] + sgx;
                    }
                }
                let mut gx = vec![E::zero(); x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (mu, is) = (ctx.mean[ci], ctx.inv_std[ci]);
                        let scale = gam[ci] * is;
                        let mean_g = dbeta[ci] / m;
                        let mean_gx = dgamma[ci] / m;
                        for p in 0..plane {
                            let xhat = (x[base + p] - mu) * is;
                            gx[base + p] = scale * (g[base + p] - mean_g - xhat * mean_gx);
                        }
                    }
                }
                self.accumulate(grads, *input, &gx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![E::zero(); self.value(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] = gx[src] + g[o];
                }
                self.accumulate(grads, *input, &gx);
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.value(*input).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let scale = E::from_f64(1.0 / plane as f64);
                let mut gx = vec![E::zero(); n * c * plane];
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g[ni * c + ci] * scale;
                        let base = (ni * c + ci) * plane;
                        for p in 0..plane {
                            gx[base + p] = gv;
                        }
                    }
                }
                self.accumulate(grads, *input, &gx);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x_shape = self.value(*input).shape();
                let w_shape = self.value(*weight).shape();
                let (n, f, cols) = (x_shape[0], x_shape[1], w_shape[1]);
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let mut gx = vec![E::zero(); n * f];
                let mut gw = vec![E::zero(); f * cols];
                let mut gb = vec![E::zero(); cols];
                for r in 0..n {
                    let g_row = &g[r * cols..(r + 1) * cols];
                    for k in 0..f {
                        let w_row = &wt[k * cols..(k + 1) * cols];
                        let mut acc = E::zero();
                        for j in 0..cols {
                            acc = acc + g_row[j] * w_row[j];
                        }
                        gx[r * f + k] = acc;
                        let xv = x[r * f + k];
                        let gw_row = &mut gw[k * cols..(k + 1) * cols];
                        for j in 0..cols {
                            gw_row[j] = gw_row[j] + xv * g_row[j];
                        }
                    }
                    for j in 0..cols {
                        gb[j] = gb[j] + g_row[j];
                    }
                }
                self.accumulate(grads, *input, &gx);
                self.accumulate(grads, *weight, &gw);
                self.accumulate(grads, *bias, &gb);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gx: Vec<E> = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                    .collect();
                self.accumulate(grads, *input, &gx);
            }
            Op::Sigmoid { input } => {
                let s = self.value(id).data();
                let gx: Vec<E> = g
                    .iter()
                    .zip(s)
                    .map(|(&gv, &sv)| gv * sv * (E::one() - sv))
                    .collect();
                self.accumulate(grads, *input, &gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                softmax,
                targets,
            } => {
                let n = self.value(*logits).shape()[0];
                let inv_n = E::from_f64(1.0 / n as f64);
                let g0 = g[0];
                let gx: Vec<E> = softmax
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| g0 * (p - t) * inv_n)
                    .collect();
                self.accumulate(grads, *logits, &gx);
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, *lhs, g);
                self.accumulate(grads, *rhs, g);
            }
            Op::Mul { lhs, rhs } => {
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                let ga: Vec<E> = g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect();
                let gb: Vec<E> = g.iter().zip(a).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(grads, *lhs, &ga);
                self.accumulate(grads, *rhs, &gb);
            }
            Op::BroadcastTo { input, src_shape } => {
                let out_shape = self.value(id).shape();
                let mut gx = vec![E::zero(); self.value(*input).numel()];
                let strides = broadcast_strides(src_shape, out_shape);
                let mut coords = vec![0usize; out_shape.len()];
                let mut src = 0usize;
                for &gv in g.iter() {
                    gx[src] = gx[src] + gv;
                    advance(&mut coords, &mut src, out_shape, &strides);
                }
                self.accumulate(grads, *input, &gx);
            }
            Op::ConcatChannels { inputs } => {
                let out_shape = self.value(id).shape();
                let (n, c_total, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let plane = h * w;
                let mut c_off = 0;
                for &src_id in inputs {
                    let ci = self.value(src_id).shape()[1];
                    let mut gx = vec![E::zero(); n * ci * plane];
                    for ni in 0..n {
                        let dst_base = (ni * c_total + c_off) * plane;
                        let src_base = ni * ci * plane;
                        gx[src_base..src_base + ci * plane]
                            .copy_from_slice(&g[dst_base..dst_base + ci * plane]);
                    }
                    self.accumulate(grads, src_id, &gx);
                    c_off += ci;
                }
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g);
            }
            Op::Dropout { input, mask } => {
                let gx: Vec<E> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *input, &gx);
            }
            Op::Scale { input, factor } => {
                let gx: Vec<E> = g.iter().map(|&gv| gv * *factor).collect();
                self.accumulate(grads, *input, &gx);
            }
            Op::Sum { input } => {
                let gx = vec![g[0]; self.value(*input).numel()];
                self.accumulate(grads, *input, &gx);
            }
        }
    }
}

/// Source strides for repetition broadcast: 0 where the source extent is 1.
fn broadcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        strides[d] = if src_shape[d] == 1 { 0 } else { acc };
        acc *= src_shape[d];
    }
    strides
}

/// Row-major odometer step over `shape`, keeping `src` in sync via the
/// broadcast strides.
#[inline]
fn advance(coords: &mut [usize], src: &mut usize, shape: &[usize], strides: &[usize]) {
    for d in (0..shape.len()).rev() {
        coords[d] += 1;
        *src += strides[d];
        if coords[d] < shape[d] {
            return;
        }
        *src -= strides[d] * shape[d];
        coords[d] = 0;
    }
}

/// Output coordinates y in [0, out) with 0 <= y*stride + offset < extent.
fn valid_range(out: usize, stride: usize, offset: i64, extent: usize) -> (usize, usize) {
    let stride = stride as i64;
    // smallest y with y*stride + offset >= 0
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + stride - 1) / stride
    };
    // largest y with y*stride + offset <= extent - 1
    let hi_num = extent as i64 - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = hi_num / stride + 1;
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out);
    (lo.min(hi), hi)
}
