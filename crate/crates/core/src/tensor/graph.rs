//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly and
//! records its parents, so node ids are a topological order by construction.
//! [`Graph::backward`] walks the tape once in reverse.

use super::kernels::{self, ConvGeometry};
use super::{Float, Tensor};
use crate::error::{shape_mismatch, Error, Result};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations of the gate arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Hadamard,
}

impl Pointwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Pointwise::Add | Pointwise::Hadamard)
    }
}

/// Operation tag of a node, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    Linear,
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Hadamard,
    Scale,
    ConcatChannels,
    SliceChannels,
    ConcatRows,
    GlobalAvgPool,
    AvgPool,
    BatchMean,
    BatchBroadcast,
    Sum,
    SoftmaxCrossEntropy,
    L1,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Linear,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Add,
        OpKind::Hadamard,
        OpKind::Scale,
        OpKind::ConcatChannels,
        OpKind::SliceChannels,
        OpKind::ConcatRows,
        OpKind::GlobalAvgPool,
        OpKind::AvgPool,
        OpKind::BatchMean,
        OpKind::BatchBroadcast,
        OpKind::Sum,
        OpKind::SoftmaxCrossEntropy,
        OpKind::L1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::Linear => "linear",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Hadamard => "hadamard",
            OpKind::Scale => "scale",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SliceChannels => "slice_channels",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::AvgPool => "avg_pool2d",
            OpKind::BatchMean => "batch_mean",
            OpKind::BatchBroadcast => "batch_broadcast",
            OpKind::Sum => "sum",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::L1 => "l1_loss",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        /// Geometry of the equivalent forward convolution on the output.
        geom: ConvGeometry,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Unary(Pointwise, NodeId),
    Binary(Pointwise, NodeId, NodeId),
    Scale(NodeId, T),
    ConcatChannels(NodeId, NodeId),
    SliceChannels {
        input: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    GlobalAvgPool(NodeId),
    AvgPool {
        input: NodeId,
        size: usize,
    },
    BatchMean(NodeId),
    BatchBroadcast(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1(NodeId, NodeId),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::Unary(Pointwise::Sigmoid, _) => OpKind::Sigmoid,
            Op::Unary(Pointwise::Tanh, _) => OpKind::Tanh,
            Op::Unary(_, _) => OpKind::Relu,
            Op::Binary(Pointwise::Add, _, _) => OpKind::Add,
            Op::Binary(_, _, _) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::BatchMean(_) => OpKind::BatchMean,
            Op::BatchBroadcast(_) => OpKind::BatchBroadcast,
            Op::Sum(_) => OpKind::Sum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::L1(..) => OpKind::L1,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, f64)>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales every gradient contribution emitted by `kind` during backward.
    /// Only meant for negative-control fixtures of the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind, scale: f64) {
        self.fault = Some((kind, scale));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_bias(&self, op: &'static str, bias: Option<NodeId>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(shape_mismatch(op, self.shape(b), &[channels]));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `input` `[N, C, H, W]` with `weight` `[O, C, kH, kW]`
    /// plus an optional per-channel `bias` `[O]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [o, wc, kh, kw] = self.value(weight).dims4("conv2d")?;
        if c != wc {
            return Err(shape_mismatch("conv2d", self.shape(input), self.shape(weight)));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        self.check_bias("conv2d", bias, o)?;
        let (Some(oh), Some(ow)) = (
            ConvGeometry::out_extent(h, kh, stride, padding),
            ConvGeometry::out_extent(w, kw, stride, padding),
        ) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}x{kw} with padding {padding} does not fit input {h}x{w}"
                ),
            });
        };
        let geom = ConvGeometry { c, h, w, kh, kw, stride, pad: padding, oh, ow };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(weight).data(),
            o,
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        let parents: Vec<NodeId> = [Some(input), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.push(Op::Conv2d { input, weight, bias, geom }, value, &parents))
    }

    /// Transposed (fractionally strided) convolution; `weight` is
    /// `[C_in, C_out, kH, kW]`. Output extent is `(H - 1) * stride - 2 * padding + kH`.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("conv_transpose2d")?;
        let [wc, o, kh, kw] = self.value(weight).dims4("conv_transpose2d")?;
        if c != wc {
            return Err(shape_mismatch(
                "conv_transpose2d",
                self.shape(input),
                self.shape(weight),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv_transpose2d: stride must be positive".into(),
            ));
        }
        self.check_bias("conv_transpose2d", bias, o)?;
        let extent = |size: usize, k: usize| -> Option<usize> {
            let e = (size as isize - 1) * stride as isize - 2 * padding as isize + k as isize;
            (e >= 1).then_some(e as usize)
        };
        let (Some(oh), Some(ow)) = (extent(h, kh), extent(w, kw)) else {
            return Err(Error::InvalidShape {
                op: "conv_transpose2d",
                msg: format!("padding {padding} leaves no output for input {h}x{w}"),
            });
        };
        let geom = ConvGeometry { c: o, h: oh, w: ow, kh, kw, stride, pad: padding, oh: h, ow: w };
        let out = kernels::conv_transpose2d_forward(
            self.value(input).data(),
            n,
            c,
            &geom,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        let parents: Vec<NodeId> = [Some(input), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.push(Op::ConvTranspose2d { input, weight, bias, geom }, value, &parents))
    }

    /// Affine map of `input` `[N, F]` by `weight` `[O, F]` and `bias` `[O]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        let (&[n, f], &[o, wf]) = (xs, ws) else {
            return Err(shape_mismatch("linear", xs, ws));
        };
        if f != wf {
            return Err(shape_mismatch("linear", xs, ws));
        }
        self.check_bias("linear", bias, o)?;
        let out = kernels::linear_forward(
            self.value(input).data(),
            n,
            f,
            self.value(weight).data(),
            o,
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, o], out)?;
        let parents: Vec<NodeId> = [Some(input), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.push(Op::Linear { input, weight, bias }, value, &parents))
    }

    /// Elementwise op. Binary ops need identical shapes; there is no broadcasting.
    pub fn pointwise(&mut self, op: Pointwise, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match (op.is_binary(), b) {
            (true, Some(b)) => {
                if self.shape(a) != self.shape(b) {
                    return Err(shape_mismatch(
                        if op == Pointwise::Add { "add" } else { "hadamard" },
                        self.shape(a),
                        self.shape(b),
                    ));
                }
                let (va, vb) = (self.value(a), self.value(b));
                let data = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| if op == Pointwise::Add { x + y } else { x * y })
                    .collect();
                let value = Tensor::new(va.shape(), data)?;
                Ok(self.push(Op::Binary(op, a, b), value, &[a, b]))
            }
            (false, None) => {
                let f: fn(T) -> T = match op {
                    Pointwise::Sigmoid => sigmoid,
                    Pointwise::Tanh => T::tanh,
                    _ => |x: T| x.max(T::zero()),
                };
                let value = self.value(a).map(f);
                Ok(self.push(Op::Unary(op, a), value, &[a]))
            }
            (true, None) => Err(Error::InvalidArgument(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::InvalidArgument(format!("{op:?} takes one operand"))),
        }
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Sigmoid, a, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Tanh, a, None)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Relu, a, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Add, a, Some(b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.pointwise(Pointwise::Hadamard, a, Some(b))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let s = T::of(factor);
        let value = self.value(a).map(|v| v * s);
        Ok(self.push(Op::Scale(a, s), value, &[a]))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_mismatch("concat_channels", self.shape(a), self.shape(b)));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (sa + sb));
        for s in 0..n {
            data.extend_from_slice(&va[s * sa..(s + 1) * sa]);
            data.extend_from_slice(&vb[s * sb..(s + 1) * sb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.push(Op::ConcatChannels(a, b), value, &[a, b]))
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                msg: format!("channels {start}..{} outside {c}", start + len),
            });
        }
        let hw = h * w;
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            data.extend_from_slice(&src[base..base + len * hw]);
        }
        let value = Tensor::new(&[n, len, h, w], data)?;
        Ok(self.push(Op::SliceChannels { input, start }, value, &[input]))
    }

    /// Concatenates tensors along their first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let tail = self.shape(first).get(1..).unwrap_or_default().to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let shape = self.shape(p);
            if shape.is_empty() || shape[1..] != tail[..] {
                return Err(shape_mismatch("concat_rows", self.shape(first), shape));
            }
            rows += shape[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    /// Mean over the spatial extents: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let data = self
            .value(input)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(Op::GlobalAvgPool(input), value, &[input]))
    }

    /// Average pooling with window and stride `size`. Windows overhanging the
    /// border average only their in-bounds cells, so the output extent is
    /// `ceil(H / size)` (matching a stride-`size`, 3x3, padding-1 convolution).
    pub fn avg_pool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("avg_pool2d")?;
        if size == 0 {
            return Err(Error::InvalidArgument("avg_pool2d: size must be positive".into()));
        }
        let (oh, ow) = (h.div_ceil(size), w.div_ceil(size));
        let src = self.value(input).data();
        let mut data = vec![T::zero(); n * c * oh * ow];
        for (plane, out) in src.chunks_exact(h * w).zip(data.chunks_exact_mut(oh * ow)) {
            for oy in 0..oh {
                let ys = oy * size..((oy + 1) * size).min(h);
                for ox in 0..ow {
                    let xs = ox * size..((ox + 1) * size).min(w);
                    let count = (ys.len() * xs.len()) as f64;
                    let mut acc = T::zero();
                    for y in ys.clone() {
                        for x in xs.clone() {
                            acc += plane[y * w + x];
                        }
                    }
                    out[oy * ow + ox] = acc * T::of(1.0 / count);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.push(Op::AvgPool { input, size }, value, &[input]))
    }

    /// Mean over the leading (batch) axis, keeping it with extent 1.
    pub fn batch_mean(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        let n = *v.shape().first().ok_or_else(|| Error::InvalidShape {
            op: "batch_mean",
            msg: "scalar has no batch axis".into(),
        })?;
        let per = v.len() / n;
        let inv = T::of(1.0 / n as f64);
        let mut data = vec![T::zero(); per];
        for sample in v.data().chunks_exact(per) {
            data.iter_mut().zip(sample).for_each(|(d, &x)| *d += x);
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape = v.shape().to_vec();
        shape[0] = 1;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(Op::BatchMean(input), value, &[input]))
    }

    /// Repeats a batch-1 tensor `n` times along the batch axis.
    pub fn batch_broadcast(&mut self, input: NodeId, n: usize) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape().first() != Some(&1) || n == 0 {
            return Err(Error::InvalidShape {
                op: "batch_broadcast",
                msg: format!("expected batch extent 1, got {:?} (target {n})", v.shape()),
            });
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let data = v.data().repeat(n);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(Op::BatchBroadcast(input), value, &[input]))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(input).sum());
        Ok(self.push(Op::Sum(input), value, &[input]))
    }

    /// Batch mean of `-log softmax(logits)[label]`, stabilised by max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits);
        let &[n, k] = shape else {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                msg: format!("logits must be [N, K], got {shape:?}"),
            });
        };
        if labels.len() != n {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                msg: format!("{} labels for batch of {n}", labels.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total += z.ln() - (row[label] - max);
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            &[logits],
        ))
    }

    /// Mean absolute difference of two same-shape tensors.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch("l1_loss", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let total: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Tensor::scalar(total / T::of(va.len() as f64));
        Ok(self.push(Op::L1(a, b), value, &[a, b]))
    }

    /// Reverse-mode gradients of the scalar `root` with respect to every leaf
    /// that requires gradients. Leaves that do not influence `root` get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one())?);

        for index in (0..=root.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            if let Op::SliceChannels { input, start } = node.op {
                // Scattered straight into the parent's slot, skipping a full-size temporary.
                let factor = match self.fault {
                    Some((OpKind::SliceChannels, f)) => T::of(f),
                    _ => T::one(),
                };
                let parent = self.value(input);
                let [n, c, h, w] = parent.dims4("slice_channels")?;
                let len = upstream.shape()[1] * h * w;
                let slot = grads[input.0].get_or_insert_with(|| parent.zeros_like());
                let dst = slot.data_mut();
                for (s, src) in upstream.data().chunks_exact(len).enumerate().take(n) {
                    let base = (s * c + start) * h * w;
                    dst[base..base + len].iter_mut().zip(src).for_each(|(d, &v)| *d += v * factor);
                }
                continue;
            }
            let mut contributions = self.node_backward(node, &upstream)?;
            if let Some((kind, factor)) = self.fault {
                if node.op.kind() == kind {
                    let f = T::of(factor);
                    for (_, g) in contributions.iter_mut() {
                        g.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            for (parent, g) in contributions {
                accumulate(&mut grads, parent, g);
            }
        }

        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if slot.is_none() {
                    *slot = Some(node.value.zeros_like());
                }
            } else {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let mut out = Vec::with_capacity(3);
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let need = [self.wants(*input), self.wants(*weight), bias.is_some_and(|b| self.wants(b))];
                let grads = kernels::conv2d_backward(
                    x.data(),
                    x.shape()[0],
                    geom,
                    w.data(),
                    w.shape()[0],
                    gd,
                    need,
                );
                push_grads(&mut out, grads, [Some(*input), Some(*weight), *bias], [x, w], self)?;
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let need = [self.wants(*input), self.wants(*weight), bias.is_some_and(|b| self.wants(b))];
                let grads = kernels::conv_transpose2d_backward(
                    x.data(),
                    x.shape()[0],
                    x.shape()[1],
                    geom,
                    w.data(),
                    gd,
                    need,
                );
                push_grads(&mut out, grads, [Some(*input), Some(*weight), *bias], [x, w], self)?;
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let need = [self.wants(*input), self.wants(*weight), bias.is_some_and(|b| self.wants(b))];
                let grads = kernels::linear_backward(
                    x.data(),
                    x.shape()[0],
                    x.shape()[1],
                    w.data(),
                    w.shape()[0],
                    gd,
                    need,
                );
                push_grads(&mut out, grads, [Some(*input), Some(*weight), *bias], [x, w], self)?;
            }
            Op::Unary(kind, a) => {
                let y = node.value.data();
                let x = self.value(*a).data();
                let data: Vec<T> = match kind {
                    Pointwise::Sigmoid => gd.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
                    Pointwise::Tanh => gd.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect(),
                    _ => gd
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                };
                out.push((*a, Tensor::new(g.shape(), data)?));
            }
            Op::Binary(kind, a, b) => match kind {
                Pointwise::Add => {
                    if self.wants(*a) {
                        out.push((*a, g.clone()));
                    }
                    if self.wants(*b) {
                        out.push((*b, g.clone()));
                    }
                }
                _ => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.wants(*a) {
                        let d = gd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                        out.push((*a, Tensor::new(g.shape(), d)?));
                    }
                    if self.wants(*b) {
                        let d = gd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                        out.push((*b, Tensor::new(g.shape(), d)?));
                    }
                }
            },
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                let cb = self.value(*b).shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * sa);
                let mut gb = Vec::with_capacity(n * sb);
                for sample in gd.chunks_exact(sa + sb) {
                    ga.extend_from_slice(&sample[..sa]);
                    gb.extend_from_slice(&sample[sa..]);
                }
                if self.wants(*a) {
                    out.push((*a, Tensor::new(&[n, ca, h, w], ga)?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::new(&[n, cb, h, w], gb)?));
                }
            }
            Op::SliceChannels { .. } => unreachable!("slice gradients are scattered in backward"),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        out.push((p, Tensor::new(self.shape(p), gd[offset..offset + len].to_vec())?));
                    }
                    offset += len;
                }
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let [_, _, h, w] = x.dims4("global_avg_pool")?;
                let inv = T::of(1.0 / (h * w) as f64);
                let mut gi = Vec::with_capacity(x.len());
                for &v in gd {
                    gi.extend(std::iter::repeat_n(v * inv, h * w));
                }
                out.push((*input, Tensor::new(x.shape(), gi)?));
            }
            Op::AvgPool { input, size } => {
                let x = self.value(*input);
                let [_, _, h, w] = x.dims4("avg_pool2d")?;
                let [_, _, oh, ow] = node.value.dims4("avg_pool2d")?;
                let mut gi = vec![T::zero(); x.len()];
                for (plane, go) in gi.chunks_exact_mut(h * w).zip(gd.chunks_exact(oh * ow)) {
                    for oy in 0..oh {
                        let ys = oy * size..((oy + 1) * size).min(h);
                        for ox in 0..ow {
                            let xs = ox * size..((ox + 1) * size).min(w);
                            let share = go[oy * ow + ox] * T::of(1.0 / (ys.len() * xs.len()) as f64);
                            for y in ys.clone() {
                                for xx in xs.clone() {
                                    plane[y * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                out.push((*input, Tensor::new(x.shape(), gi)?));
            }
            Op::BatchMean(input) => {
                let x = self.value(*input);
                let n = x.shape()[0];
                let inv = T::of(1.0 / n as f64);
                let scaled: Vec<T> = gd.iter().map(|&v| v * inv).collect();
                out.push((*input, Tensor::new(x.shape(), scaled.repeat(n))?));
            }
            Op::BatchBroadcast(input) => {
                let x = self.value(*input);
                let per = x.len();
                let mut gi = vec![T::zero(); per];
                for sample in gd.chunks_exact(per) {
                    gi.iter_mut().zip(sample).for_each(|(d, &v)| *d += v);
                }
                out.push((*input, Tensor::new(x.shape(), gi)?));
            }
            Op::Sum(input) => {
                let x = self.value(*input);
                out.push((*input, Tensor::full(x.shape(), gd[0])?));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let x = self.value(*logits);
                let k = x.shape()[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut gi: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in gi.chunks_exact_mut(k).zip(labels) {
                    row[label] -= scale;
                }
                out.push((*logits, Tensor::new(x.shape(), gi)?));
            }
            Op::L1(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = gd[0] / T::of(va.len() as f64);
                let sign: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    out.push((*b, Tensor::new(va.shape(), sign.iter().map(|&s| -s).collect())?));
                }
                if self.wants(*a) {
                    out.push((*a, Tensor::new(va.shape(), sign)?));
                }
            }
        }
        Ok(out)
    }
}

fn push_grads<T: Float>(
    out: &mut Vec<(NodeId, Tensor<T>)>,
    grads: kernels::ConvGrads<T>,
    ids: [Option<NodeId>; 3],
    values: [&Tensor<T>; 2],
    graph: &Graph<T>,
) -> Result<()> {
    if let (Some(id), Some(g)) = (ids[0], grads.input) {
        out.push((id, Tensor::new(values[0].shape(), g)?));
    }
    if let (Some(id), Some(g)) = (ids[1], grads.weight) {
        out.push((id, Tensor::new(values[1].shape(), g)?));
    }
    if let (Some(id), Some(g)) = (ids[2], grads.bias) {
        out.push((id, Tensor::new(graph.shape(id), g)?));
    }
    Ok(())
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, &v)| *e += v),
        slot => *slot = Some(g),
    }
}

/// Logistic function `1 / (1 + e^-x)`, evaluated without overflow for large |x|.
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
