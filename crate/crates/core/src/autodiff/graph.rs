//! Tape-style reverse-mode gradient graph.
//!
//! Every op appends a node holding its forward value. Nodes are pushed in
//! execution order, so the sequence is topological by construction and
//! `backward` walks it once in reverse. A graph supports exactly one backward
//! pass; a second call is rejected because the forward values it would reuse
//! describe a computation that has already been consumed.

use super::kernels::{self, ChannelLayout, ConvGeom};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a caller-supplied backward rule.
///
/// The quantizers use this to register straight-through gradients.
pub trait CustomOp<T: Element> {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Returns one gradient per input (`None` for inputs that get none).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own per-channel moments.
    Train,
    /// Normalize with stored running moments.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Output of [`Graph::batch_norm`]; carries the batch moments in train mode.
#[derive(Debug)]
pub struct BnOutput<T> {
    pub out: Var,
    pub batch_mean: Option<Vec<T>>,
    pub batch_var: Option<Vec<T>>,
}

enum Op<T: Element> {
    Leaf,
    /// Produced only from inputs that need no gradient.
    Detached,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Add(Var, Var),
    MulScalar(Var, T),
    AddScalar(Var),
    Relu(Var),
    Clip01(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Reshape(Var),
    Scale {
        x: Var,
        alpha: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    TanhNormalize {
        w: Var,
        tanh: Vec<T>,
        argmax: usize,
        max_abs: T,
    },
    HalfMse(Var, Var),
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation for one forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Element>(op: &str, t: &Tensor<T>, what: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: op.to_string(),
            what,
        })
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, false, Op::Leaf)
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push_raw(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        check_finite(name, &value, "forward output")?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Detached };
        Ok(self.push_raw(value, requires_grad, op))
    }

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape(
                "matmul",
                format!("expected 2-D operands, got {sa:?} and {sb:?}"),
            ));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {k} vs {k2} ({sa:?} · {sb:?})"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new([m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (&[n, fin], &[fout, fin2]) = (sx, sw) else {
            return Err(Error::shape(
                "linear",
                format!("expected 2-D input and weight, got {sx:?} and {sw:?}"),
            ));
        };
        if fin != fin2 {
            return Err(Error::shape("linear", format!("input features {fin} vs weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {fout} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        kernels::gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let value = Tensor::new([n, fout], out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push("linear", value, &inputs, Op::Linear { x, w, b })
    }

    /// 2-D convolution without bias; `x: (n,c,h,w)`, `w: (o,c,kh,kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                    self.shape(x),
                    self.shape(w)
                ),
            )
        })?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new([geom.n, geom.o, geom.oh, geom.ow], out)?;
        self.push("conv2d", value, &[x, w], Op::Conv2d { x, w, geom })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("mul_scalar", value, &[x], Op::MulScalar(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + s);
        self.push("add_scalar", value, &[x], Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, &[x], Op::Relu(x))
    }

    /// `clip(x, 0, 1)`.
    pub fn clip01(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()).min(T::one()));
        self.push("clip01", value, &[x], Op::Clip01(x))
    }

    /// Per-channel batch normalization over `(n, c, ...)`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>, eps: T) -> Result<BnOutput<T>> {
        let layout = ChannelLayout::of(self.shape(x))
            .ok_or_else(|| Error::shape("batchnorm", format!("input {:?} has no channel axis", self.shape(x))))?;
        for (name, v) in [("scale", gamma), ("shift", beta)] {
            if self.shape(v) != [layout.c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} {:?} vs {} channels", self.shape(v), layout.c),
                ));
            }
        }
        let xs = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let (m, v) = kernels::channel_moments(&layout, xs);
                (m, v, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != layout.c || var.len() != layout.c {
                    return Err(Error::shape("batchnorm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for ch in 0..layout.c {
            let (m, is) = (mean[ch], inv_std[ch]);
            layout.for_channel(ch, |i| {
                let h = (xs[i] - m) * is;
                xhat[i] = h;
                out[i] = g[ch] * h + b[ch];
            });
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            "batchnorm",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok(BnOutput {
            out: v,
            batch_mean: train.then_some(mean),
            batch_var: train.then_some(var),
        })
    }

    /// Non-overlapping `k×k` max pooling (trailing rows/columns dropped).
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.pool_shape("maxpool2d", x, k)?;
        let (out, argmax) = kernels::maxpool_forward(self.shape(x), k, self.value(x).data());
        let value = Tensor::new(shape, out)?;
        self.push("maxpool2d", value, &[x], Op::MaxPool { x, argmax })
    }

    /// Non-overlapping `k×k` average pooling; `k = h = w` gives global pooling.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.pool_shape("avgpool2d", x, k)?;
        let out = kernels::avgpool_forward(self.shape(x), k, self.value(x).data());
        let value = Tensor::new(shape, out)?;
        self.push("avgpool2d", value, &[x], Op::AvgPool { x, k })
    }

    fn pool_shape(&self, op: &'static str, x: Var, k: usize) -> Result<Vec<usize>> {
        match *self.shape(x) {
            [n, c, h, w] if k > 0 && h >= k && w >= k => Ok(vec![n, c, h / k, w / k]),
            ref s => Err(Error::shape(op, format!("input {s:?} with window {k}"))),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    /// `(n, ...) -> (n, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s.first().ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Multiplies `x` by the single trainable value in `alpha`.
    pub fn scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.value(alpha).numel() != 1 {
            return Err(Error::shape(
                "scale_layer",
                format!("alpha shape {:?}", self.shape(alpha)),
            ));
        }
        let a = self.value(alpha).item();
        let value = self.value(x).map(|v| v * a);
        self.push("scale_layer", value, &[x, alpha], Op::Scale { x, alpha })
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, c] = self.shape(logits) else {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} not 2-D", self.shape(logits)),
            ));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} with {c} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (row, (zr, pr)) in z.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let mx = zr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &v) in pr.iter_mut().zip(zr) {
                *p = (v - mx).exp();
                denom = denom + *p;
            }
            for p in pr.iter_mut() {
                *p = *p / denom;
            }
            total = total + (denom.ln() + mx - zr[labels[row]]);
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        self.push(
            "softmax_cross_entropy",
            value,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// `tanh(w) / (2·max|tanh(w)|) + 1/2`, mapping a weight tensor into `[0, 1]`.
    ///
    /// For an all-zero tensor (`max|tanh(w)| = 0`) the output is `1/2`
    /// everywhere with zero gradient.
    pub fn tanh_normalize(&mut self, w: Var) -> Result<Var> {
        let tanh: Vec<T> = self.value(w).data().iter().map(|v| v.tanh()).collect();
        let mut argmax = 0;
        for (i, t) in tanh.iter().enumerate() {
            if t.abs() > tanh[argmax].abs() {
                argmax = i;
            }
        }
        let max_abs = tanh[argmax].abs();
        let half = T::of(0.5);
        let data = if max_abs > T::zero() {
            let inv = T::one() / (max_abs + max_abs);
            tanh.iter().map(|&t| t * inv + half).collect()
        } else {
            vec![half; tanh.len()]
        };
        let value = Tensor::new(self.shape(w).to_vec(), data)?;
        self.push(
            "tanh_normalize",
            value,
            &[w],
            Op::TanhNormalize {
                w,
                tanh,
                argmax,
                max_abs,
            },
        )
    }

    /// Mean over elements of `½(a − b)²`.
    pub fn half_mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "half_mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let n = self.value(a).numel();
        let sum: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        let value = Tensor::scalar(sum * T::of(0.5) / T::of(n as f64));
        self.push("half_mse", value, &[a, b], Op::HalfMse(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push("sum", value, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).numel() as f64);
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum::<T>() / n);
        self.push("mean", value, &[x], Op::Mean(x))
    }

    /// Records an op whose backward rule is supplied by `op`.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&ins)?;
        let name = op.name().to_string();
        self.push(
            &name,
            value,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward(
                "graph already consumed by a previous backward pass; run a new forward".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss is not a node of this graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &upstream)?;
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                check_finite(self.op_name(idx), &g, "gradient")?;
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; interior nodes keep theirs too so
            // callers can inspect intermediate sensitivities.
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
        Ok(())
    }

    fn op_name(&self, idx: usize) -> &str {
        match &self.nodes[idx].op {
            Op::Leaf => "leaf",
            Op::Detached => "detached",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Clip01(..) => "clip01",
            Op::BatchNorm { .. } => "batchnorm",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Reshape(..) => "reshape",
            Op::Scale { .. } => "scale_layer",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::TanhNormalize { .. } => "tanh_normalize",
            Op::HalfMse(..) => "half_mse",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn node_backward(&self, idx: usize, up: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data);
        let u = up.data();
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Detached => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, u, false, val(b).data(), true, T::zero(), &mut da);
                    out.push((a, like(a, da)?));
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, val(a).data(), true, u, false, T::zero(), &mut db);
                    out.push((b, like(b, db)?));
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, fin) = (val(x).shape()[0], val(x).shape()[1]);
                let fout = val(w).shape()[0];
                if needs(x) {
                    let mut dx = vec![T::zero(); n * fin];
                    kernels::gemm(n, fout, fin, u, false, val(w).data(), false, T::zero(), &mut dx);
                    out.push((x, like(x, dx)?));
                }
                if needs(w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    kernels::gemm(fout, n, fin, u, true, val(x).data(), false, T::zero(), &mut dw);
                    out.push((w, like(w, dw)?));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![T::zero(); fout];
                    for row in u.chunks(fout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    out.push((b, like(b, db)?));
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(&geom, val(x).data(), val(w).data(), u, needs(x), needs(w));
                if let Some(dx) = dx {
                    out.push((x, like(x, dx)?));
                }
                if let Some(dw) = dw {
                    out.push((w, like(w, dw)?));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, up.clone()));
                out.push((b, up.clone()));
            }
            &Op::MulScalar(x, s) => out.push((x, up.map(|g| g * s))),
            &Op::AddScalar(x) => out.push((x, up.clone())),
            &Op::Relu(x) => {
                let d = u
                    .iter()
                    .zip(val(x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((x, like(x, d)?));
            }
            &Op::Clip01(x) => {
                let d = u
                    .iter()
                    .zip(val(x).data())
                    .map(|(&g, &v)| if v >= T::zero() && v <= T::one() { g } else { T::zero() })
                    .collect();
                out.push((x, like(x, d)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let layout = ChannelLayout::of(val(*x).shape()).expect("validated in forward");
                let g = val(*gamma).data();
                let mut dgamma = vec![T::zero(); layout.c];
                let mut dbeta = vec![T::zero(); layout.c];
                for ch in 0..layout.c {
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    layout.for_channel(ch, |i| {
                        sg = sg + u[i];
                        sgx = sgx + u[i] * xhat[i];
                    });
                    dbeta[ch] = sg;
                    dgamma[ch] = sgx;
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); u.len()];
                    let m = T::of(layout.count() as f64);
                    for ch in 0..layout.c {
                        let k = g[ch] * inv_std[ch];
                        if *train {
                            let (sg, sgx) = (dbeta[ch], dgamma[ch]);
                            layout.for_channel(ch, |i| {
                                dx[i] = k * (u[i] - sg / m - xhat[i] * sgx / m);
                            });
                        } else {
                            layout.for_channel(ch, |i| dx[i] = k * u[i]);
                        }
                    }
                    out.push((*x, like(*x, dx)?));
                }
                out.push((*gamma, like(*gamma, dgamma)?));
                out.push((*beta, like(*beta, dbeta)?));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (&g, &a) in u.iter().zip(argmax) {
                    dx[a as usize] = dx[a as usize] + g;
                }
                out.push((*x, like(*x, dx)?));
            }
            &Op::AvgPool { x, k } => {
                let dx = kernels::avgpool_backward(val(x).shape(), k, u);
                out.push((x, like(x, dx)?));
            }
            &Op::Reshape(x) => out.push((x, like(x, u.to_vec())?)),
            &Op::Scale { x, alpha } => {
                let a = val(alpha).item();
                if needs(x) {
                    out.push((x, up.map(|g| g * a)));
                }
                let da: T = u.iter().zip(val(x).data()).map(|(&g, &v)| g * v).sum();
                out.push((alpha, like(alpha, vec![da])?));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let c = val(*logits).shape()[1];
                let scale = up.item() / T::of(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * c + l] = d[row * c + l] - scale;
                }
                out.push((*logits, like(*logits, d)?));
            }
            Op::TanhNormalize {
                w,
                tanh,
                argmax,
                max_abs,
            } => {
                let mut d = vec![T::zero(); tanh.len()];
                if *max_abs > T::zero() {
                    let inv = T::one() / (*max_abs + *max_abs);
                    let mut through_max = T::zero();
                    for (i, (&g, &t)) in u.iter().zip(tanh).enumerate() {
                        d[i] = g * (T::one() - t * t) * inv;
                        through_max = through_max - g * t * inv / *max_abs;
                    }
                    let t = tanh[*argmax];
                    d[*argmax] = d[*argmax] + through_max * t.signum() * (T::one() - t * t);
                }
                out.push((*w, like(*w, d)?));
            }
            &Op::HalfMse(a, b) => {
                let s = up.item() / T::of(val(a).numel() as f64);
                let diff: Vec<T> = val(a)
                    .data()
                    .iter()
                    .zip(val(b).data())
                    .map(|(&p, &q)| (p - q) * s)
                    .collect();
                if needs(b) {
                    out.push((b, like(b, diff.iter().map(|&v| -v).collect())?));
                }
                out.push((a, like(a, diff)?));
            }
            &Op::Sum(x) => out.push((x, Tensor::full(val(x).shape().to_vec(), up.item()))),
            &Op::Mean(x) => {
                let g = up.item() / T::of(val(x).numel() as f64);
                out.push((x, Tensor::full(val(x).shape().to_vec(), g)));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &self.nodes[idx].value, up)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Backward(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        if g.shape() != val(v).shape() {
                            return Err(Error::Backward(format!(
                                "{}: gradient shape {:?} vs input {:?}",
                                op.name(),
                                g.shape(),
                                val(v).shape()
                            )));
                        }
                        out.push((v, g));
                    }
                }
            }
        }
        Ok(out)
    }
}
