//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so the node list is already a
//! topological order and [`Tape::backward`] walks it in reverse.

mod gradcheck;
mod kernels;

pub use gradcheck::grad_check;
pub use kernels::RoiRegion;
pub(crate) use kernels::{axpy, dot, window_out};

use kernels::{ConvGeom, PoolGeom};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    RoiPool {
        input: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        input: Var,
        slope: T,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape {
        input: Var,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: T,
    },
    Grl {
        input: Var,
    },
    Sum {
        input: Var,
        axes: Vec<usize>,
        mean: bool,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        weights: Option<Vec<T>>,
        beta: f64,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, requires_grad: bool, record: Op<T>) -> Result<Var> {
        check_finite(op, value.data())?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: record,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records an input value. Gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let rg = value.requires_grad();
        self.push("leaf", value, rg, Op::Leaf)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Result<Var> {
        value.set_requires_grad(false);
        self.push("constant", value, false, Op::Leaf)
    }

    /// Records a value whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("param", value.with_requires_grad(), true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match C_out = {}", self.shape(b), geom.cout),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new(geom.out_shape(), out)?;
        self.push("conv2d", value, rg, Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        })
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let g = PoolGeom::new(self.shape(input), kernel, stride, pad)?;
        let (out, argmax) = kernels::max_pool_forward(self.value(input).data(), &g);
        let rg = self.rg(&[input]);
        let value = Tensor::new(vec![g.n, g.c, g.oh, g.ow], out)?;
        self.push("max_pool2d", value, rg, Op::MaxPool2d { input, argmax })
    }

    /// Max-pools each region of `input` (`[N,C,H,W]`) into an
    /// `out_h x out_w` grid, producing `[regions, C, out_h, out_w]`.
    pub fn roi_pool(&mut self, input: Var, rois: &[RoiRegion], out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("roi_pool", format!("input must be [N,C,H,W], got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("roi_pool", "output size must be positive"));
        }
        for r in rois {
            if r.batch >= shape[0] || r.y1 > shape[2] || r.x1 > shape[3] || r.y0 > r.y1 || r.x0 > r.x1 {
                return Err(Error::shape("roi_pool", format!("region {r:?} outside feature map {shape:?}")));
            }
        }
        let (out, argmax) = kernels::roi_pool_forward(self.value(input).data(), &shape, rois, out_h, out_w);
        let rg = self.rg(&[input]);
        let value = Tensor::new(vec![rois.len(), shape[1], out_h, out_w], out)?;
        self.push("roi_pool", value, rg, Op::RoiPool { input, argmax })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} outside (0, 1]")));
        }
        let s = T::from_f64(slope);
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { s * v })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[input]);
        self.push("leaky_relu", value, rg, Op::LeakyRelu { input, slope: s })
    }

    /// `input [N,D] @ weight [D,K] + bias [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape(
                "linear",
                format!("expected 2-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        if ws[0] != d {
            return Err(Error::shape(
                "linear",
                format!("input inner dimension {d} does not match weight rows {}", ws[0]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} does not match K = {k}", self.shape(b)),
                ));
            }
        }
        let x = kernels::to_f64(self.value(input).data());
        let w = kernels::to_f64(self.value(weight).data());
        let b = bias.map(|b| kernels::to_f64(self.value(b).data()));
        let mut out = Vec::with_capacity(n * k);
        let mut acc = vec![0.0f64; k];
        for row in x.chunks_exact(d.max(1)).take(n) {
            match &b {
                Some(b) => acc.copy_from_slice(b),
                None => acc.iter_mut().for_each(|a| *a = 0.0),
            }
            for (di, &xv) in row.iter().enumerate().take(d) {
                if xv != 0.0 {
                    kernels::axpy(xv, &w[di * k..][..k], &mut acc);
                }
            }
            out.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
        if d == 0 {
            out.resize(n * k, T::zero());
            if let Some(b) = &b {
                for (i, v) in out.iter_mut().enumerate() {
                    *v = T::from_f64(b[i % k]);
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new(vec![n, k], out)?;
        self.push("linear", value, rg, Op::Linear { input, weight, bias })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[input]);
        self.push("reshape", value, rg, Op::Reshape { input })
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.is_empty() {
            return Err(Error::shape("flatten", "cannot flatten a scalar"));
        }
        let rest: usize = s[1..].iter().product();
        let shape = [s[0], rest];
        self.reshape(input, &shape)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} outside shape {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(&[input]);
        let value = Tensor::new(shape, out)?;
        self.push("narrow", value, rg, Op::Narrow { input, axis, start })
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dimensions {s:?} do not match {tail:?}"),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(inputs);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, rg, Op::Concat { inputs: inputs.to_vec() })
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        self.push("add", v, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", v, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", v, rg, Op::Mul(a, b))
    }

    /// Multiplies by a constant; no gradient flows into `factor`.
    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let x = self.value(input);
        let v = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&p| p * f).collect())?;
        let rg = self.rg(&[input]);
        self.push("scale", v, rg, Op::Scale { input, factor: f })
    }

    pub fn neg(&mut self, input: Var) -> Result<Var> {
        self.scale(input, -1.0)
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn grl(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input).clone();
        let rg = self.rg(&[input]);
        self.push("grl", v, rg, Op::Grl { input })
    }

    pub fn sum(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, axes, false)
    }

    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, axes, true)
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(input, &axes, false)
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(input, &axes, true)
    }

    fn reduce(&mut self, input: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let op = if mean { "reduce_mean" } else { "reduce_sum" };
        let shape = self.shape(input).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape(op, format!("axis {a} out of range for {shape:?}")));
        }
        let (out_shape, map) = reduction_map(&shape, &axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if mean && count == 0 {
            return Err(Error::shape(op, "mean over an empty extent"));
        }
        let out_len: usize = out_shape.iter().product();
        let mut acc = vec![0.0f64; out_len];
        for (i, &v) in self.value(input).data().iter().enumerate() {
            acc[map[i]] += v.as_f64();
        }
        if mean {
            let c = count as f64;
            acc.iter_mut().for_each(|v| *v /= c);
        }
        let value = Tensor::new(out_shape, kernels::from_f64(&acc))?;
        let rg = self.rg(&[input]);
        self.push(op, value, rg, Op::Sum { input, axes, mean })
    }

    /// Mean softmax cross-entropy of `logits [N,K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let z = kernels::to_f64(self.value(logits).data());
        let mut probs = vec![0.0f64; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * k..][..k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + se.ln();
            total += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(T::from_f64(total / n as f64));
        let rg = self.rg(&[logits]);
        self.push("softmax_cross_entropy", value, rg, Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        })
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `targets`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "sigmoid_bce",
                format!("{} logits with {} targets", z.numel(), targets.len()),
            ));
        }
        let mut total = 0.0;
        for (&zi, &y) in z.data().iter().zip(targets) {
            let x = zi.as_f64();
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(T::from_f64(total / targets.len() as f64));
        let rg = self.rg(&[logits]);
        let targets = targets.iter().map(|&t| T::from_f64(t)).collect();
        self.push("sigmoid_bce", value, rg, Op::SigmoidBce { logits, targets })
    }

    /// Mean smooth-L1: `0.5 x^2 / beta` for `|x| < beta`, else `|x| - 0.5 beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        let n = self.value(pred).numel();
        self.smooth_l1_impl(pred, target, None, beta, n as f64)
    }

    /// `sum(weights * smooth_l1(pred - target)) / denom`.
    pub fn smooth_l1_weighted(&mut self, pred: Var, target: Var, weights: &[f64], beta: f64, denom: f64) -> Result<Var> {
        if weights.len() != self.value(pred).numel() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{} weights for {} predictions", weights.len(), self.value(pred).numel()),
            ));
        }
        let w = weights.iter().map(|&v| T::from_f64(v)).collect();
        self.smooth_l1_impl(pred, target, Some(w), beta, denom)
    }

    fn smooth_l1_impl(&mut self, pred: Var, target: Var, weights: Option<Vec<T>>, beta: f64, denom: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "smooth_l1",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        if !(beta > 0.0) || !(denom > 0.0) {
            return Err(Error::InvalidArgument(format!("smooth_l1 beta {beta} / denom {denom} must be positive")));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut total = 0.0;
        for i in 0..p.len() {
            let w = weights.as_ref().map_or(1.0, |w| w[i].as_f64());
            if w == 0.0 {
                continue;
            }
            let x = (p[i].as_f64() - t[i].as_f64()).abs();
            let l = if x < beta { 0.5 * x * x / beta } else { x - 0.5 * beta };
            total += w * l;
        }
        let value = Tensor::scalar(T::from_f64(total / denom));
        let rg = self.rg(&[pred, target]);
        self.push("smooth_l1", value, rg, Op::SmoothL1 {
            pred,
            target,
            weights,
            beta,
            denom,
        })
    }

    /// Propagates d`loss` back through the tape. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let lv = &self.node(loss).value;
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {
                add_into(&mut self.leaf_grads[i], g);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = (wants(*input), wants(*kernel), bias.map_or(false, wants));
                let r = kernels::conv2d_backward(
                    nodes[input.0].value.data(),
                    nodes[kernel.0].value.data(),
                    &g,
                    geom,
                    need,
                );
                if let Some(gx) = r.input {
                    add_into(&mut grads[input.0], gx);
                }
                if let Some(gw) = r.kernel {
                    add_into(&mut grads[kernel.0], gw);
                }
                if let (Some(b), Some(gb)) = (bias, r.bias) {
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::MaxPool2d { input, argmax } | Op::RoiPool { input, argmax } => {
                let mut gx = vec![T::zero(); nodes[input.0].value.numel()];
                for (&gi, &idx) in g.iter().zip(argmax) {
                    gx[idx] = gx[idx] + gi;
                }
                add_into(&mut grads[input.0], gx);
            }
            Op::LeakyRelu { input, slope } => {
                let x = nodes[input.0].value.data();
                let gx = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= T::zero() { gi } else { gi * *slope })
                    .collect();
                add_into(&mut grads[input.0], gx);
            }
            Op::Linear { input, weight, bias } => {
                let xs = nodes[input.0].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let k = nodes[weight.0].value.shape()[1];
                let gf = kernels::to_f64(&g);
                if wants(*input) {
                    let w = kernels::to_f64(nodes[weight.0].value.data());
                    let mut gx = vec![0.0f64; n * d];
                    for r in 0..n {
                        let grow = &gf[r * k..][..k];
                        for di in 0..d {
                            gx[r * d + di] = kernels::dot(grow, &w[di * k..][..k]);
                        }
                    }
                    add_into(&mut grads[input.0], kernels::from_f64(&gx));
                }
                if wants(*weight) {
                    let x = kernels::to_f64(nodes[input.0].value.data());
                    let mut gw = vec![0.0f64; d * k];
                    for r in 0..n {
                        let grow = &gf[r * k..][..k];
                        for di in 0..d {
                            let xv = x[r * d + di];
                            if xv != 0.0 {
                                kernels::axpy(xv, grow, &mut gw[di * k..][..k]);
                            }
                        }
                    }
                    add_into(&mut grads[weight.0], kernels::from_f64(&gw));
                }
                if let Some(b) = bias.filter(|&b| wants(b)) {
                    let mut gb = vec![0.0f64; k];
                    for r in 0..n {
                        for j in 0..k {
                            gb[j] += gf[r * k + j];
                        }
                    }
                    add_into(&mut grads[b.0], kernels::from_f64(&gb));
                }
            }
            Op::Reshape { input } => {
                add_into(&mut grads[input.0], g);
            }
            Op::Narrow { input, axis, start } => {
                let s = nodes[input.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); nodes[input.0].value.numel()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(&mut grads[input.0], gx);
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.numel();
                    if wants(v) {
                        add_into(&mut grads[v.0], g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    add_into(&mut grads[a.0], g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], g.iter().zip(x).map(|(&gi, &xi)| gi * xi).collect());
                }
            }
            Op::Scale { input, factor } => {
                add_into(&mut grads[input.0], g.iter().map(|&v| v * *factor).collect());
            }
            Op::Grl { input } => {
                add_into(&mut grads[input.0], g.iter().map(|&v| -v).collect());
            }
            Op::Sum { input, axes, mean } => {
                let shape = nodes[input.0].value.shape();
                let (_, map) = reduction_map(shape, axes);
                let scale = if *mean {
                    1.0 / axes.iter().map(|&a| shape[a]).product::<usize>() as f64
                } else {
                    1.0
                };
                let s = T::from_f64(scale);
                let gx = map.iter().map(|&o| g[o] * s).collect();
                add_into(&mut grads[input.0], gx);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = nodes[logits.0].value.shape()[1];
                let n = labels.len();
                let scale = g[0].as_f64() / n as f64;
                let mut gx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * k + l] -= 1.0;
                }
                gx.iter_mut().for_each(|v| *v *= scale);
                add_into(&mut grads[logits.0], kernels::from_f64(&gx));
            }
            Op::SigmoidBce { logits, targets } => {
                let scale = g[0].as_f64() / targets.len() as f64;
                let gx = nodes[logits.0]
                    .value
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| T::from_f64((sigmoid(z.as_f64()) - y.as_f64()) * scale))
                    .collect();
                add_into(&mut grads[logits.0], gx);
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
                denom,
            } => {
                let p = nodes[pred.0].value.data();
                let t = nodes[target.0].value.data();
                let scale = g[0].as_f64() / denom;
                let gp: Vec<f64> = (0..p.len())
                    .map(|i| {
                        let w = weights.as_ref().map_or(1.0, |w| w[i].as_f64());
                        let x = p[i].as_f64() - t[i].as_f64();
                        let d = if x.abs() < *beta { x / beta } else { x.signum() };
                        w * d * scale
                    })
                    .collect();
                if wants(*target) {
                    add_into(&mut grads[target.0], gp.iter().map(|&v| T::from_f64(-v)).collect());
                }
                if wants(*pred) {
                    add_into(&mut grads[pred.0], kernels::from_f64(&gp));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output shape (reduced axes dropped) and the output index of every input
/// element.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for &a in keep.iter().rev() {
        out_strides[a] = stride;
        stride *= shape[a];
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

#[cfg(test)]
mod tests;
