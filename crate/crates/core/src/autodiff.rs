//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during a forward pass together with
//! its output value. [`Graph::backward`] walks the tape once in reverse; a
//! second call on the same tape is an error. Parameters from a
//! [`ParamStore`] are bound lazily as leaves, and only stores registered with
//! [`Graph::train_store`] receive gradients.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, conv, fft, resample, Activation, NormCache, NormKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalization uses batch statistics and reports them for running estimates.
    Train,
    /// Normalization uses stored running estimates.
    Eval,
}

/// An op with a hand-written forward and backward, for fused kernels that
/// live outside this module.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradients for each input, given the upstream gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    Rfft2(Var),
    Irfft2(Var),
    ResampleNearest(Var),
    NormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        cache: NormCache<T>,
    },
    NormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    MeanAbs(Var),
    BceWithLogits {
        x: Var,
        target: bool,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode normalization layer.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub store: u64,
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Clamp used when taking logs of probabilities.
pub const PROB_EPS: f64 = 1e-7;

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    consumed: bool,
    bound: HashMap<(u64, usize), Var>,
    trainable: HashSet<u64>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            consumed: false,
            bound: HashMap::new(),
            trainable: HashSet::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Marks a store's parameters as requiring gradients in this graph.
    /// Must be called before any of its parameters are bound.
    pub fn train_store(&mut self, store: &ParamStore<T>) {
        self.trainable.insert(store.uid());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. }
            | Op::ConvTranspose2d { x, w, b, .. }
            | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::Rfft2(a)
            | Op::Irfft2(a)
            | Op::ResampleNearest(a)
            | Op::Sum(a)
            | Op::MeanAbs(a) => vec![*a],
            Op::Narrow { x, .. } | Op::BceWithLogits { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::NormTrain { x, gamma, beta, .. } | Op::NormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// A leaf; `requires_grad` leaves receive gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].needs_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a parameter from `store` as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return Ok(v);
        }
        let trainable = self.trainable.contains(&store.uid()) && store.is_trainable(id);
        let v = self.leaf(store.get(id).clone(), trainable)?;
        self.bound.insert(key, v);
        Ok(v)
    }

    /// Same values as `v`, but gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// Transposed convolution with weight `(in, out, kh, kw)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        self.push(y, Op::ConvTranspose2d { x, w, b, stride, pad }, "conv_transpose2d")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.push(y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let y = self.value(a).map(|v| v * k);
        self.push(y, Op::Scale(a, k), "scale")
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(a);
        }
        let y = self.value(a).map(|v| act.apply(v));
        self.push(y, Op::Act(a, act), "activation")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    /// Concatenation along axis 1 of `(n, c, ...)` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat needs tensors of rank >= 2"));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::shape(format!(
                    "concat: shape {s:?} incompatible with {first:?}"
                )));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for ni in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let y = Tensor::new(&shape, data)?;
        self.push(y, Op::Concat(parts.to_vec()), "concat")
    }

    /// Channels `[start, start + len)` of a `(n, c, ...)` tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(Error::shape(format!(
                "narrow_channels: {start}..{} out of range for shape {s:?}",
                start + len
            )));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for ni in 0..s[0] {
            let base = (ni * s[1] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let y = Tensor::new(&shape, data)?;
        self.push(y, Op::Narrow { x, start }, "narrow_channels")
    }

    /// Real FFT as stacked `(n, 2c, h, w/2+1)` real/imaginary channels.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let y = fft::spectrum_to_stacked(&fft::rfft2(self.value(x))?);
        self.push(y, Op::Rfft2(x), "rfft2")
    }

    /// Inverse of [`Graph::rfft2`] back to spatial width `width`.
    pub fn irfft2(&mut self, x: Var, width: usize) -> Result<Var> {
        let spec = fft::stacked_to_spectrum(self.value(x), width)?;
        let y = fft::irfft2(&spec)?;
        self.push(y, Op::Irfft2(x), "irfft2")
    }

    pub fn resample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = resample::resample_nearest(self.value(x), out_h, out_w)?;
        self.push(y, Op::ResampleNearest(x), "resample_nearest")
    }

    /// Training-mode normalization; returns the output and the per-channel
    /// batch mean and variance.
    pub fn norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (y, cache, mean, var) =
            kernels::normalize_train(self.value(x), self.value(gamma), self.value(beta), kind)?;
        let v = self.push(
            y,
            Op::NormTrain {
                x,
                gamma,
                beta,
                kind,
                cache,
            },
            "norm",
        )?;
        Ok((v, mean, var))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` with fixed statistics.
    pub fn norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("norm_eval: statistics length mismatch"));
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + lit(kernels::NORM_EPS)).sqrt())
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        if gd.len() != c || bd.len() != c {
            return Err(Error::shape("norm_eval: affine parameter length mismatch"));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(xd.len());
        for ni in 0..n {
            for ci in 0..c {
                for &v in &xd[(ni * c + ci) * hw..][..hw] {
                    y.push(gd[ci] * (v - mean[ci]) * inv_std[ci] + bd[ci]);
                }
            }
        }
        let y = Tensor::new(&[n, c, h, w], y)?;
        self.push(
            y,
            Op::NormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            "norm_eval",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean absolute value, i.e. the L1 loss of a difference.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean_abs of an empty tensor"));
        }
        let s: T = t.data().iter().map(|v| v.abs()).sum::<T>() / lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAbs(x), "mean_abs")
    }

    /// `mean(-log p)` with `p = sigmoid(x)` for real targets and `1 - sigmoid(x)`
    /// otherwise, probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce_with_logits(&mut self, x: Var, target: bool) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "bce_with_logits" });
        }
        let eps: T = lit(PROB_EPS);
        let s: T = t
            .data()
            .iter()
            .map(|&v| {
                let p = kernels::sigmoid(v);
                let q = if target { p } else { T::one() - p };
                -(q.max(eps).min(T::one() - eps)).ln()
            })
            .sum::<T>()
            / lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::BceWithLogits { x, target }, "bce_with_logits")
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = op.forward(&vals)?;
        let name = op.name();
        self.push(
            y,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            name,
        )
    }

    /// Reverse pass from a scalar. Consumes the tape: a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.node_backward(i, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                if wants(*x) {
                    let gx = conv::conv2d_backward_input(g, val(*w), val(*x).dims4()?, *stride, *pad)?;
                    out.push((*x, gx));
                }
                if wants(*w) {
                    let gw = conv::conv2d_backward_weight(g, val(*x), val(*w).dims4()?, *stride, *pad)?;
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        out.push((*b, conv::conv2d_backward_bias(g)?));
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                // y = conv2d_backward_input(x; w), so its adjoints are conv2d
                // forward (for x) and the weight gradient with roles swapped.
                if wants(*x) {
                    out.push((*x, conv::conv2d(g, val(*w), None, *stride, *pad)?));
                }
                if wants(*w) {
                    let gw = conv::conv2d_backward_weight(val(*x), g, val(*w).dims4()?, *stride, *pad)?;
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        out.push((*b, conv::conv2d_backward_bias(g)?));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = kernels::dims2(val(*x))?;
                let outd = val(*w).shape()[0];
                let gd = g.data();
                if wants(*x) {
                    let wd = val(*w).data();
                    let mut gx = vec![T::zero(); rows * inp];
                    for r in 0..rows {
                        for o in 0..outd {
                            let go = gd[r * outd + o];
                            for k in 0..inp {
                                gx[r * inp + k] = gx[r * inp + k] + go * wd[o * inp + k];
                            }
                        }
                    }
                    out.push((*x, Tensor::new(&[rows, inp], gx)?));
                }
                if wants(*w) {
                    let xd = val(*x).data();
                    let mut gw = vec![T::zero(); outd * inp];
                    for r in 0..rows {
                        for o in 0..outd {
                            let go = gd[r * outd + o];
                            for k in 0..inp {
                                gw[o * inp + k] = gw[o * inp + k] + go * xd[r * inp + k];
                            }
                        }
                    }
                    out.push((*w, Tensor::new(&[outd, inp], gw)?));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut gb = vec![T::zero(); outd];
                        for r in 0..rows {
                            for o in 0..outd {
                                gb[o] = gb[o] + gd[r * outd + o];
                            }
                        }
                        out.push((*b, Tensor::new(&[outd], gb)?));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, g.zip_map(val(*b), |p, q| p * q)?));
                }
                if wants(*b) {
                    out.push((*b, g.zip_map(val(*a), |p, q| p * q)?));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.map(|v| v * *k))),
            Op::Act(a, act) => {
                out.push((*a, g.zip_map(&node.value, |gv, y| gv * act.grad_from_output(y))?));
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1];
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let c = ps[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(val(p).len());
                        for ni in 0..s[0] {
                            let base = (ni * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + c * inner]);
                        }
                        out.push((p, Tensor::new(&ps, d)?));
                    }
                    offset += c;
                }
            }
            Op::Narrow { x, start } => {
                let xs = val(*x).shape().to_vec();
                let inner: usize = xs[2..].iter().product();
                let len = node.value.shape()[1];
                let mut d = vec![T::zero(); val(*x).len()];
                for ni in 0..xs[0] {
                    let dst = (ni * xs[1] + start) * inner;
                    let src = ni * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*x, Tensor::new(&xs, d)?));
            }
            Op::Rfft2(x) => {
                let w = val(*x).shape()[3];
                let spec = fft::stacked_to_spectrum(g, w)?;
                out.push((*x, fft::rfft2_adjoint(&spec)?));
            }
            Op::Irfft2(x) => {
                out.push((*x, fft::spectrum_to_stacked(&fft::irfft2_adjoint(g)?)));
            }
            Op::ResampleNearest(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                out.push((*x, resample::resample_nearest_backward(g, h, w)?));
            }
            Op::NormTrain {
                x,
                gamma,
                beta,
                kind,
                cache,
            } => {
                let (gx, gg, gb) = kernels::normalize_train_backward(g, val(*gamma), cache, *kind)?;
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::NormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = g.dims4()?;
                let hw = h * w;
                let (gd, xd, gm) = (g.data(), val(*x).data(), val(*gamma).data());
                let mut gx = Vec::with_capacity(gd.len());
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for k in base..base + hw {
                            gx.push(gd[k] * gm[ci] * inv_std[ci]);
                            gg[ci] = gg[ci] + gd[k] * (xd[k] - mean[ci]) * inv_std[ci];
                            gb[ci] = gb[ci] + gd[k];
                        }
                    }
                }
                out.push((*x, Tensor::new(&[n, c, h, w], gx)?));
                out.push((*gamma, Tensor::new(&[c], gg)?));
                out.push((*beta, Tensor::new(&[c], gb)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::MeanAbs(x) => {
                let k = g.item() / lit(val(*x).len() as f64);
                out.push((*x, val(*x).map(|v| k * sign(v))));
            }
            Op::BceWithLogits { x, target } => {
                let k = g.item() / lit(val(*x).len() as f64);
                let eps: T = lit(PROB_EPS);
                let gx = val(*x).map(|v| {
                    let p = kernels::sigmoid(v);
                    let q = if *target { p } else { T::one() - p };
                    if q < eps || q > T::one() - eps {
                        T::zero()
                    } else if *target {
                        k * (p - T::one())
                    } else {
                        k * p
                    }
                });
                out.push((*x, gx));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&vals, &node.value, g)?;
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        out.push((v, gv));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a store's parameters, indexed by [`ParamId`].
    pub fn store_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| {
                self.bound
                    .get(&(store.uid(), i))
                    .and_then(|&v| grads.get(v).cloned())
            })
            .collect()
    }
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_weight_gradient_is_input() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.constant(Tensor::new(&[1, 3], vec![0.5, -2.0, 3.0]).unwrap()).unwrap();
        let w = g.leaf(Tensor::full(&[2, 3], 0.1), true).unwrap();
        let y = g.linear(x, w, None).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        let gw = grads.get(w).unwrap();
        assert_eq!(gw.data(), &[0.5, -2.0, 3.0, 0.5, -2.0, 3.0]);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let w = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(w, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::<f64>::new(Mode::Train);
        let w = g.leaf(Tensor::scalar(1.0), true).unwrap();
        let y = g.scale(w, 2.0).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let a = g.constant(Tensor::scalar(f32::MAX)).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let a = g.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64)).unwrap();
        let b = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64)).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 2, 2]);
        let back = g.narrow_channels(c, 1, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }
}
