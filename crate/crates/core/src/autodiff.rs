//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every differentiable operation in execution order; each
//! call returns a [`Var`] handle to the freshly computed value. Calling
//! [`Tape::backward`] on a one-element result walks the tape in reverse,
//! visiting each recorded op once, and returns the accumulated gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, NormGeom};
use crate::kernels::pool::{self, PoolGeom};
use crate::kernels::{resize, window_out_len};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Per-channel running mean/variance used by batch norm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1: the state of a freshly built layer.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: true,
        }
    }

    /// Stats that have never been set; eval mode refuses them.
    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::zero(); channels],
            initialized: false,
        }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>) -> Self {
        RunningStats {
            mean,
            var,
            initialized: true,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<T> {
    pub mode: Mode,
    pub momentum: T,
    pub epsilon: T,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Softplus(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        geom: NormGeom,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    MaxPool {
        input: Var,
        geom: PoolGeom,
        argmax: Vec<usize>,
    },
    Resize {
        input: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    Concat {
        inputs: Vec<(Var, usize)>,
        batch: usize,
        plane: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Square(Var),
    Abs(Var),
    DiffW(Var),
    DiffH(Var),
    Sum(Var),
    WeightedSum(Var, Vec<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Resize { .. } => "bilinear_resize",
            Op::Concat { .. } => "concat_channels",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::DiffW(_) => "diff_w",
            Op::DiffH(_) => "diff_h",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
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

    /// Scalar value of a one-element var.
    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if cin != wcin {
            return Err(Error::Config(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                ));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (Some(out_h), Some(out_w)) = (
            window_out_len(h, kh, stride, padding),
            window_out_len(w, kw, stride, padding),
        ) else {
            return Err(shape_err!(
                "conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"
            ));
        };
        let geom = ConvGeom {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = conv::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, cout, out_h, out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Relu(x), &[x])
    }

    /// `ln(1 + e^x)`, strictly positive.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) + (-v.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Softplus(x), &[x])
    }

    /// Batch normalization over N, H, W per channel. In train mode the batch
    /// statistics normalize the input and update `stats` as an exponential
    /// moving average (`stats = (1 - momentum) * stats + momentum * batch`,
    /// unbiased variance); eval mode normalizes with `stats`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        params: BatchNormParams<T>,
    ) -> Result<Var> {
        if params.epsilon <= T::zero() {
            return Err(Error::Config("batch_norm: epsilon must be positive".into()));
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(shape_err!(
                    "batch_norm: {what} shape {:?}, expected [{c}]",
                    self.shape(v)
                ));
            }
        }
        if stats.channels() != c {
            return Err(shape_err!(
                "batch_norm: running stats for {} channels, input has {c}",
                stats.channels()
            ));
        }
        let geom = NormGeom {
            batch: n,
            channels: c,
            plane: h * w,
        };
        let x = self.value(input).data();
        let (mean, inv_std, train) = match params.mode {
            Mode::Train => {
                let (mean, var) = norm::channel_stats(&geom, x);
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::one() / (v + params.epsilon).sqrt())
                    .collect();
                let count = n * h * w;
                let unbias = if count > 1 {
                    T::from_f64(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let keep = T::one() - params.momentum;
                for ch in 0..c {
                    stats.mean[ch] = keep * stats.mean[ch] + params.momentum * mean[ch];
                    stats.var[ch] = keep * stats.var[ch] + params.momentum * var[ch] * unbias;
                }
                stats.initialized = true;
                (mean, inv_std, true)
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::State(
                        "batch_norm: eval mode with uninitialized running statistics".into(),
                    ));
                }
                let inv_std = stats
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + params.epsilon).sqrt())
                    .collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let (y, xhat) = norm::normalize(
            &geom,
            x,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(vec![n, c, h, w], y)?;
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                geom,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        )
    }

    fn pool_geom(&self, x: Var, kernel: usize, stride: usize, padding: usize, op: &str) -> Result<PoolGeom> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be positive")));
        }
        let (Some(out_h), Some(out_w)) = (
            window_out_len(h, kernel, stride, padding),
            window_out_len(w, kernel, stride, padding),
        ) else {
            return Err(shape_err!(
                "{op}: {kernel}x{kernel} window does not fit {h}x{w} input with padding {padding}"
            ));
        };
        if padding * 2 >= kernel && padding > 0 {
            return Err(Error::Config(format!(
                "{op}: padding {padding} too large for window {kernel}"
            )));
        }
        Ok(PoolGeom {
            planes: n * c,
            height: h,
            width: w,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.pool_geom(x, kernel, stride, padding, "avg_pool2d")?;
        let (n, c, _, _) = self.value(x).dims4()?;
        let out = pool::avg_pool_forward(&geom, self.value(x).data());
        let value = Tensor::new(vec![n, c, geom.out_h, geom.out_w], out)?;
        self.push(value, Op::AvgPool { input: x, geom }, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.pool_geom(x, kernel, stride, padding, "max_pool2d")?;
        let (n, c, _, _) = self.value(x).dims4()?;
        let (out, argmax) = pool::max_pool_forward(&geom, self.value(x).data());
        let value = Tensor::new(vec![n, c, geom.out_h, geom.out_w], out)?;
        self.push(
            value,
            Op::MaxPool {
                input: x,
                geom,
                argmax,
            },
            &[x],
        )
    }

    /// Bilinear resize with the half-pixel convention
    /// `src = (dst + 0.5) * in / out - 0.5`, clamped to the border.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize to empty extent {out_h}x{out_w}"));
        }
        let out = resize::bilinear_forward(self.value(x).data(), n * c, (h, w), (out_h, out_w));
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        self.push(
            value,
            Op::Resize {
                input: x,
                planes: n * c,
                from: (h, w),
                to: (out_h, out_w),
            },
            &[x],
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_all(&[a, b])
    }

    /// Channel-axis concatenation of any number of NCHW tensors with equal
    /// N, H, W. No implicit cropping.
    pub fn concat_all(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err!("concat of zero tensors"));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut inputs = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!(
                    "concat_channels: {:?} does not match N={n} H={h} W={w}",
                    self.shape(p)
                ));
            }
            inputs.push((p, pc));
        }
        let plane = h * w;
        let total_c: usize = inputs.iter().map(|&(_, c)| c).sum();
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &(p, c) in &inputs {
                out.extend_from_slice(&self.value(p).data()[b * c * plane..][..c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        self.push(
            value,
            Op::Concat {
                inputs,
                batch: n,
                plane,
            },
            parts,
        )
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self.value(a), self.value(b), name)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let v = self.unary(x, |a| a * k)?;
        self.push(v, Op::Scale(x, k), &[x])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, k: T) -> Result<Var> {
        let v = self.unary(x, |a| a + k)?;
        self.push(v, Op::Offset(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a * a)?;
        self.push(v, Op::Square(x), &[x])
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a.abs())?;
        self.push(v, Op::Abs(x), &[x])
    }

    /// Forward difference along width: `out[.., j] = x[.., j + 1] - x[.., j]`.
    pub fn diff_w(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if w < 2 {
            return Err(shape_err!("diff_w needs width >= 2, got {w}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * (w - 1));
        for row in src.chunks(w) {
            out.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let value = Tensor::new(vec![n, c, h, w - 1], out)?;
        self.push(value, Op::DiffW(x), &[x])
    }

    /// Forward difference along height: `out[.., i, :] = x[.., i + 1, :] - x[.., i, :]`.
    pub fn diff_h(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 {
            return Err(shape_err!("diff_h needs height >= 2, got {h}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * (h - 1) * w);
        for plane in src.chunks(h * w) {
            for i in 0..h - 1 {
                out.extend((0..w).map(|j| plane[(i + 1) * w + j] - plane[i * w + j]));
            }
        }
        let value = Tensor::new(vec![n, c, h - 1, w], out)?;
        self.push(value, Op::DiffH(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let w = T::one() / T::from_f64(n as f64);
        self.weighted_sum(x, vec![w; n])
    }

    /// `sum_i weights[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(shape_err!(
                "weighted_sum: {} weights for tensor of shape {:?}",
                weights.len(),
                self.shape(x)
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), &[x])
    }

    /// Hash of every branch decision taken by non-smooth ops (relu and abs
    /// signs, max-pool winners). Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Abs(x) => {
                    for &v in self.value(*x).data() {
                        (v >= T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e = *e + d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if needs(*input) {
                    acc(*input, conv::conv2d_backward_input(geom, self.value(*weight).data(), g));
                }
                if needs(*weight) {
                    acc(*weight, conv::conv2d_backward_weight(geom, self.value(*input).data(), g));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        acc(*b, conv::conv2d_backward_bias(geom, g));
                    }
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                acc(*x, zip_map(g, xs, |d, v| if v > T::zero() { d } else { T::zero() }));
            }
            Op::Softplus(x) => {
                let xs = self.value(*x).data();
                acc(*x, zip_map(g, xs, |d, v| d * sigmoid(v)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                geom,
                xhat,
                inv_std,
                train,
            } => {
                let (sum_dy, sum_dy_xhat) = norm::grad_sums(geom, g, xhat);
                if needs(*input) {
                    let gam = self.value(*gamma).data();
                    let gx = if *train {
                        norm::backward_input_train(geom, g, xhat, inv_std, gam, &sum_dy, &sum_dy_xhat)
                    } else {
                        norm::backward_input_eval(geom, g, inv_std, gam)
                    };
                    acc(*input, gx);
                }
                acc(*gamma, sum_dy_xhat);
                acc(*beta, sum_dy);
            }
            Op::AvgPool { input, geom } => acc(*input, pool::avg_pool_backward(geom, g)),
            Op::MaxPool {
                input,
                geom,
                argmax,
            } => acc(*input, pool::max_pool_backward(geom, argmax, g)),
            Op::Resize {
                input,
                planes,
                from,
                to,
            } => acc(*input, resize::bilinear_backward(g, *planes, *from, *to)),
            Op::Concat {
                inputs,
                batch,
                plane,
            } => {
                let total_c: usize = inputs.iter().map(|&(_, c)| c).sum();
                let mut c0 = 0;
                for &(v, c) in inputs {
                    if needs(v) {
                        let mut part = Vec::with_capacity(batch * c * plane);
                        for b in 0..*batch {
                            part.extend_from_slice(&g[(b * total_c + c0) * plane..][..c * plane]);
                        }
                        acc(v, part);
                    }
                    c0 += c;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, zip_map(g, bv, |d, y| d * y));
                acc(*b, zip_map(g, av, |d, x| d * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, zip_map(g, bv, |d, y| d / y));
                let gb = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&d, (&x, &y))| -d * x / (y * y))
                    .collect();
                acc(*b, gb);
            }
            Op::Scale(x, k) => acc(*x, g.iter().map(|&d| d * *k).collect()),
            Op::Offset(x) => acc(*x, g.to_vec()),
            Op::Square(x) => {
                let xs = self.value(*x).data();
                acc(*x, zip_map(g, xs, |d, v| d * (v + v)));
            }
            Op::Abs(x) => {
                let xs = self.value(*x).data();
                acc(
                    *x,
                    zip_map(g, xs, |d, v| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::DiffW(x) => {
                let w = self.shape(*x)[3];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (row_g, row_x) in g.chunks(w - 1).zip(gx.chunks_mut(w)) {
                    for (j, &d) in row_g.iter().enumerate() {
                        row_x[j + 1] = row_x[j + 1] + d;
                        row_x[j] = row_x[j] - d;
                    }
                }
                acc(*x, gx);
            }
            Op::DiffH(x) => {
                let (h, w) = (self.shape(*x)[2], self.shape(*x)[3]);
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (pg, px) in g.chunks((h - 1) * w).zip(gx.chunks_mut(h * w)) {
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let d = pg[i * w + j];
                            px[(i + 1) * w + j] = px[(i + 1) * w + j] + d;
                            px[i * w + j] = px[i * w + j] - d;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::WeightedSum(x, w) => acc(*x, w.iter().map(|&wi| wi * g[0]).collect()),
        }
    }
}
