//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every operation evaluates eagerly, stores its value on the tape and
//! returns a [`Var`] handle. [`Tape::backward`] walks the tape in reverse.

use crate::error::{shape_err, Result, TensorError};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, exposed for structural inspection of recorded graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Matmul,
    Conv2d,
    Linear,
    AddChannelBias,
    ResizeNearest,
    ResizeBilinear,
    ConcatChannels,
    SliceChannels,
    GatherChannels,
    Reshape,
    Sum,
    Mean,
    GlobalMaxPool,
    GlobalAvgPool,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Square,
    StopGradient,
    BatchNorm,
    ChannelAffine,
    BceWithLogits,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    ResizeNearest(Var),
    ResizeBilinear(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    GatherChannels {
        x: Var,
        indices: Vec<Vec<usize>>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    StopGradient,
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::AddChannelBias { .. } => OpKind::AddChannelBias,
            Op::ResizeNearest(..) => OpKind::ResizeNearest,
            Op::ResizeBilinear(..) => OpKind::ResizeBilinear,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::GatherChannels { .. } => OpKind::GatherChannels,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::GlobalMaxPool { .. } => OpKind::GlobalMaxPool,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Log(..) => OpKind::Log,
            Op::Exp(..) => OpKind::Exp,
            Op::Square(..) => OpKind::Square,
            Op::StopGradient => OpKind::StopGradient,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::AddChannelBias { x, b } => vec![*x, *b],
            Op::ConcatChannels(xs) => xs.clone(),
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::ResizeNearest(x)
            | Op::ResizeBilinear(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::GlobalAvgPool(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Square(x) => vec![*x],
            Op::SliceChannels { x, .. }
            | Op::GatherChannels { x, .. }
            | Op::GlobalMaxPool { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::ChannelAffine { x, .. } => vec![*x],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Operation kinds of every node that reads `v` directly.
    pub fn consumers(&self, v: Var) -> Vec<OpKind> {
        self.nodes
            .iter()
            .filter(|n| n.op.inputs().contains(&v))
            .map(|n| n.op.kind())
            .collect()
    }

    /// Record an input value. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        value.check_finite(op_name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let v = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| TensorError::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            })?;
        self.push(name, v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("mul_scalar", v, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::Matmul(a, b))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let v = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
        )?;
        self.push("conv2d", v, Op::Conv2d { x, w, b, stride })
    }

    /// Dense layer over axis 1, applied independently at every position.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push("linear", v, Op::Linear { x, w, b })
    }

    /// `x[n, c, ...] + b[n, c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, s) = ops::channel_view("add_channel_bias", self.shape(x))?;
        if self.shape(b) != [n, c] {
            return shape_err(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", self.shape(b), self.shape(x)),
            );
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, plane) in v.data_mut().chunks_mut(s).enumerate() {
            plane.iter_mut().for_each(|e| *e = *e + bias[i]);
        }
        self.push("add_channel_bias", v, Op::AddChannelBias { x, b })
    }

    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let v = ops::resize_nearest(self.value(x), oh, ow)?;
        self.push("resize_nearest", v, Op::ResizeNearest(x))
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let v = ops::resize_bilinear(self.value(x), oh, ow)?;
        self.push("resize_bilinear", v, Op::ResizeBilinear(x))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let v = ops::concat_channels(&vals)?;
        self.push("concat_channels", v, Op::ConcatChannels(xs.to_vec()))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, _) = ops::channel_view("slice_channels", self.shape(x))?;
        if start + len > c {
            return shape_err(
                "slice_channels",
                format!("{start}+{len} exceeds {c} channels"),
            );
        }
        let idx = vec![(start..start + len).collect::<Vec<_>>(); n];
        let v = ops::gather_channels(self.value(x), &idx)?;
        self.push("slice_channels", v, Op::SliceChannels { x, start })
    }

    pub fn gather_channels(&mut self, x: Var, indices: Vec<Vec<usize>>) -> Result<Var> {
        let v = ops::gather_channels(self.value(x), &indices)?;
        self.push("gather_channels", v, Op::GatherChannels { x, indices })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).is_empty() {
            return shape_err("mean", "mean of empty tensor");
        }
        let v = Tensor::scalar(self.value(x).mean());
        self.push("mean", v, Op::Mean(x))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (v, argmax) = ops::global_max_pool(self.value(x))?;
        self.push("global_max_pool", v, Op::GlobalMaxPool { x, argmax })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        self.push("global_avg_pool", v, Op::GlobalAvgPool(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push("relu", v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::ln);
        self.push("log", v, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(T::exp);
        self.push("exp", v, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * a);
        self.push("square", v, Op::Square(x))
    }

    /// Passes the value through; no gradient flows back to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.nodes.push(Node {
            value: v,
            op: Op::StopGradient,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Per-channel standardization with batch statistics (no affine).
    /// Returns the output and the batch `(mean, variance)` used.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (mean, var) = ops::channel_moments(self.value(x))?;
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
            .collect();
        let shift: Vec<T> = mean
            .iter()
            .zip(&inv_std)
            .map(|(&m, &s)| T::from_f64_lossy(-m) * s)
            .collect();
        let v = ops::channel_affine(self.value(x), &inv_std, &shift)?;
        let out = self.push("batch_norm", v, Op::BatchNorm { x, inv_std })?;
        Ok((out, mean, var))
    }

    /// `x * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let v = ops::channel_affine(self.value(x), scale, shift)?;
        self.push(
            "channel_affine",
            v,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// evaluated in the overflow-free softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return shape_err(
                "bce_with_logits",
                format!("{:?} vs target {:?}", z.shape(), target.shape()),
            );
        }
        if z.is_empty() {
            return shape_err("bce_with_logits", "empty input");
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| {
                let (z, y) = (z.as_f64(), y.as_f64());
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let v = Tensor::scalar(T::from_f64_lossy(total / z.len() as f64));
        self.push("bce_with_logits", v, Op::BceWithLogits { logits, target })
    }

    /// Populate gradients of the scalar `loss` with respect to every
    /// recorded value that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            for (input, gi) in self.local_grads(&node.op, &node.value, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    fn local_grads(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let scalar_g = || g.data()[0];
        Ok(match op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Div(a, b) => {
                let gb = g
                    .zip_map(out, |x, o| x * o)?
                    .zip_map(val(*b), |x, d| -x / d)?;
                vec![(*a, g.zip_map(val(*b), |x, d| x / d)?), (*b, gb)]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), g, *stride)?;
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), g)?;
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::AddChannelBias { x, b } => {
                let (n, c, s) = ops::channel_view("add_channel_bias", g.shape())?;
                let db: Vec<T> = g
                    .data()
                    .chunks(s)
                    .map(|p| p.iter().copied().sum())
                    .collect();
                vec![(*x, g.clone()), (*b, Tensor::new(&[n, c], db)?)]
            }
            Op::ResizeNearest(x) => {
                let s = val(*x).shape();
                vec![(*x, ops::resize_nearest_backward(g, s[2], s[3]))]
            }
            Op::ResizeBilinear(x) => {
                let s = val(*x).shape();
                vec![(*x, ops::resize_bilinear_backward(g, s[2], s[3]))]
            }
            Op::ConcatChannels(xs) => {
                let (n, total, s) = ops::channel_view("concat_channels", g.shape())?;
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let c = val(x).shape()[1];
                    if needs(x) {
                        let mut d = Vec::with_capacity(n * c * s);
                        for ni in 0..n {
                            d.extend_from_slice(&g.data()[(ni * total + offset) * s..][..c * s]);
                        }
                        res.push((x, Tensor::new(val(x).shape(), d)?));
                    }
                    offset += c;
                }
                res
            }
            Op::SliceChannels { x, start } => {
                let (n, c, s) = ops::channel_view("slice_channels", val(*x).shape())?;
                let len = g.shape()[1];
                let mut d = vec![T::zero(); n * c * s];
                for ni in 0..n {
                    d[(ni * c + start) * s..][..len * s]
                        .copy_from_slice(&g.data()[ni * len * s..][..len * s]);
                }
                vec![(*x, Tensor::new(val(*x).shape(), d)?)]
            }
            Op::GatherChannels { x, indices } => {
                let (n, c, s) = ops::channel_view("gather_channels", val(*x).shape())?;
                let k = g.shape()[1];
                let mut d = vec![T::zero(); n * c * s];
                for (ni, idx) in indices.iter().enumerate() {
                    for (j, &ci) in idx.iter().enumerate() {
                        let src = &g.data()[(ni * k + j) * s..][..s];
                        let dst = &mut d[(ni * c + ci) * s..][..s];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                debug_assert!(n == indices.len());
                vec![(*x, Tensor::new(val(*x).shape(), d)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), scalar_g()))],
            Op::Mean(x) => {
                let n = T::from_usize(val(*x).len()).unwrap();
                vec![(*x, Tensor::full(val(*x).shape(), scalar_g() / n))]
            }
            Op::GlobalMaxPool { x, argmax } => {
                let (_, _, s) = ops::channel_view("global_max_pool", val(*x).shape())?;
                let mut d = Tensor::zeros(val(*x).shape());
                for (plane, (&a, &gv)) in
                    d.data_mut().chunks_mut(s).zip(argmax.iter().zip(g.data()))
                {
                    plane[a] = gv;
                }
                vec![(*x, d)]
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, s) = ops::channel_view("global_avg_pool", val(*x).shape())?;
                let inv = T::one() / T::from_usize(s).unwrap();
                let mut d = Tensor::zeros(val(*x).shape());
                for (plane, &gv) in d.data_mut().chunks_mut(s).zip(g.data()) {
                    plane.fill(gv * inv);
                }
                vec![(*x, d)]
            }
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(
                    val(*x),
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                )?,
            )],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(out, |gv, s| gv * s * (T::one() - s))?)],
            Op::Log(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| gv / xv)?)],
            Op::Exp(x) => vec![(*x, g.zip_map(out, |gv, e| gv * e)?)],
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                vec![(*x, g.zip_map(val(*x), |gv, xv| gv * two * xv)?)]
            }
            Op::BatchNorm { x, inv_std } => {
                // dx = inv_std * (g - mean(g) - y * mean(g * y)) per channel
                let (n, c, s) = ops::channel_view("batch_norm", out.shape())?;
                let count = (n * s) as f64;
                let mut mg = vec![0.0f64; c];
                let mut mgy = vec![0.0f64; c];
                for (i, (gp, yp)) in g.data().chunks(s).zip(out.data().chunks(s)).enumerate() {
                    let ci = i % c;
                    for (&gv, &yv) in gp.iter().zip(yp) {
                        mg[ci] += gv.as_f64();
                        mgy[ci] += gv.as_f64() * yv.as_f64();
                    }
                }
                let mut d = Tensor::zeros(out.shape());
                for (i, ((dp, gp), yp)) in d
                    .data_mut()
                    .chunks_mut(s)
                    .zip(g.data().chunks(s))
                    .zip(out.data().chunks(s))
                    .enumerate()
                {
                    let ci = i % c;
                    let (a, b, k) = (mg[ci] / count, mgy[ci] / count, inv_std[ci].as_f64());
                    for ((dv, &gv), &yv) in dp.iter_mut().zip(gp).zip(yp) {
                        *dv = T::from_f64_lossy(k * (gv.as_f64() - a - yv.as_f64() * b));
                    }
                }
                vec![(*x, d)]
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, s) = ops::channel_view("channel_affine", g.shape())?;
                let mut d = g.clone();
                for (i, plane) in d.data_mut().chunks_mut(s).enumerate() {
                    let k = scale[i % c];
                    plane.iter_mut().for_each(|v| *v = *v * k);
                }
                vec![(*x, d)]
            }
            Op::BceWithLogits { logits, target } => {
                let z = val(*logits);
                let k = scalar_g() / T::from_usize(z.len()).unwrap();
                let d = z.zip_map(target, |zv, y| {
                    (T::one() / (T::one() + (-zv).exp()) - y) * k
                })?;
                vec![(*logits, d)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_forward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), false);
        assert_eq!(tape.value(x).data(), &[1., 2., 3.]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]), true);
        let y = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let sx = tape.stop_gradient(x).unwrap();
        let p = tape.mul(sx, y).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(x, &[2]).data(), &[0.0, 0.0]);
        assert_eq!(g.get(y).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0., 1.]), true);
        assert!(matches!(
            tape.log(x),
            Err(TensorError::NonFinite { op: "log" })
        ));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1., 2.]), true);
        let b = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(&[4]), true);
        let l = tape.bce_with_logits(z, t(&[4], &[0., 1., 1., 0.])).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
