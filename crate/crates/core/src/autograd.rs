//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in evaluation order, so the tape is
//! already topologically sorted and [`Graph::backward`] walks it once in
//! reverse. A graph is built and consumed by a single training step.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::resample::ResamplePlan;
use crate::tensor::{matmul_acc, Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Resample { input: Var, plans: Rc<Vec<ResamplePlan>> },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize, end: usize },
    Reshape(Var),
    ChannelAffine { input: Var, scale: Var, shift: Var },
    Gram(Var),
    GlobalAvgPool(Var),
    NormalizeRows { input: Var, eps: f64 },
    RepeatBatch(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], an: usize, b: &[usize], bn: usize) -> Result<Vec<usize>> {
    if a == b || bn == 1 {
        Ok(a.to_vec())
    } else if an == 1 {
        Ok(b.to_vec())
    } else {
        Err(shape_err!("cannot broadcast {a:?} with {b:?}"))
    }
}

/// Reduce an output-shaped gradient onto an operand that may have been a
/// broadcast scalar.
fn unbroadcast<T: Float>(grad: Tensor<T>, operand: &Tensor<T>) -> Tensor<T> {
    if operand.numel() == grad.numel() {
        grad.reshape(operand.shape().to_vec()).expect("same numel")
    } else {
        Tensor::full(operand.shape().to_vec(), grad.sum())
    }
}

#[inline]
fn at<T: Float>(t: &Tensor<T>, i: usize) -> T {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix >= 0 && ix < w as isize { srow[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, grad: None });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Leaf value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf value whose gradient is populated by [`backward`](Self::backward).
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(ta.shape(), ta.numel(), tb.shape(), tb.numel())?;
            Tensor::from_fn(shape, |i| f(at(ta, i), at(tb, i)))
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let st = T::c(s);
        self.unary(a, Op::Scale(a, s), |x| x * st)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let st = T::c(s);
        self.unary(a, Op::Offset(a), |x| x + st)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let s = T::c(slope);
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * s })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, n) = {
            let t = self.value(a);
            (t.sum(), t.numel())
        };
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s / T::c(n as f64)), Op::Mean(a), rg)
    }

    /// Mean absolute difference, the L1 distance used by every loss term.
    pub fn l1(&self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("l1 between {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    // ---------------------------------------------------------------- layers

    /// 2-D convolution with square kernels. `weight` is `Cout×Cin×k×k`.
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let wt = &nodes[weight.0].value;
            let (n, c, h, w) = x.dims4()?;
            let (cout, cin, k, k2) = wt.dims4()?;
            if cin != c {
                return Err(shape_err!("conv2d: input has {c} channels, weight expects {cin}"));
            }
            if k != k2 || k % 2 == 0 {
                return Err(shape_err!("conv2d: kernel must be odd and square, got {k}×{k2}"));
            }
            if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
                return Err(shape_err!("conv2d: invalid stride/padding for {h}×{w}"));
            }
            if let Some(b) = bias {
                if nodes[b.0].value.numel() != cout {
                    return Err(shape_err!("conv2d: bias length must be {cout}"));
                }
            }
            let ho = (h + 2 * padding - k) / stride + 1;
            let wo = (w + 2 * padding - k) / stride + 1;
            let ckk = c * k * k;
            let plane = ho * wo;
            let mut out = vec![T::zero(); n * cout * plane];
            let mut col = vec![T::zero(); ckk * plane];
            for b in 0..n {
                let xs = &x.data()[b * c * h * w..(b + 1) * c * h * w];
                im2col(xs, c, h, w, k, stride, padding, ho, wo, &mut col);
                let os = &mut out[b * cout * plane..(b + 1) * cout * plane];
                if let Some(bv) = bias {
                    let bd = nodes[bv.0].value.data();
                    for (co, chunk) in os.chunks_mut(plane).enumerate() {
                        chunk.fill(bd[co]);
                    }
                }
                matmul_acc(cout, ckk, plane, wt.data(), false, &col, false, os, T::one());
            }
            Tensor::new([n, cout, ho, wo], out)?
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride, padding }, rg))
    }

    /// Affine map `input·weightᵀ + bias`; `input` is `N×D`, `weight` is `D'×D`.
    pub fn linear(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let wt = &nodes[weight.0].value;
            let (n, d) = match x.shape() {
                [n, d] => (*n, *d),
                s => return Err(shape_err!("linear: input must be N×D, got {s:?}")),
            };
            let (dout, din) = match wt.shape() {
                [o, i] => (*o, *i),
                s => return Err(shape_err!("linear: weight must be D'×D, got {s:?}")),
            };
            if din != d {
                return Err(shape_err!("linear: input width {d} but weight expects {din}"));
            }
            let mut out = vec![T::zero(); n * dout];
            if let Some(b) = bias {
                let bd = nodes[b.0].value.data();
                if bd.len() != dout {
                    return Err(shape_err!("linear: bias length must be {dout}"));
                }
                for row in out.chunks_mut(dout) {
                    row.copy_from_slice(bd);
                }
            }
            matmul_acc(n, d, dout, x.data(), false, wt.data(), true, &mut out, T::one());
            Tensor::new([n, dout], out)?
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    /// Apply a separable resampling plan to every plane. `plans` holds either
    /// one plan shared by the batch or one plan per batch item.
    pub fn resample(&self, input: Var, plans: Rc<Vec<ResamplePlan>>) -> Result<Var> {
        let out = {
            let x = self.value(input);
            let (n, c, h, w) = x.dims4()?;
            if plans.len() != 1 && plans.len() != n {
                return Err(shape_err!("resample: {} plans for batch of {n}", plans.len()));
            }
            let (ho, wo) = plans[0].out_dims();
            let mut out = vec![T::zero(); n * c * ho * wo];
            for b in 0..n {
                let plan = &plans[if plans.len() == 1 { 0 } else { b }];
                if plan.in_dims() != (h, w) || plan.out_dims() != (ho, wo) {
                    return Err(shape_err!("resample: plan does not match {h}×{w} input"));
                }
                for ch in 0..c {
                    let p = b * c + ch;
                    plan.apply(&x.data()[p * h * w..(p + 1) * h * w], &mut out[p * ho * wo..(p + 1) * ho * wo]);
                }
            }
            Tensor::new([n, c, ho, wo], out)?
        };
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Resample { input, plans }, rg))
    }

    pub fn upsample_nearest(&self, input: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        use crate::resample::AxisPlan;
        let plan = ResamplePlan::new(AxisPlan::nearest(h, h * factor), AxisPlan::nearest(w, w * factor));
        self.resample(input, Rc::new(vec![plan]))
    }

    pub fn upsample_bilinear(&self, input: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        use crate::resample::AxisPlan;
        let plan = ResamplePlan::new(AxisPlan::bilinear(h, h * factor), AxisPlan::bilinear(w, w * factor));
        self.resample(input, Rc::new(vec![plan]))
    }

    pub fn downsample_area(&self, input: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        use crate::resample::AxisPlan;
        let plan = ResamplePlan::new(AxisPlan::area(h, factor)?, AxisPlan::area(w, factor)?);
        self.resample(input, Rc::new(vec![plan]))
    }

    /// Concatenate `N×Cᵢ×H×W` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts.first().ok_or_else(|| shape_err!("concat of nothing"))?.0].value.dims4()?;
            let (n, _, h, w) = first;
            let mut ctot = 0;
            for p in parts {
                let (pn, pc, ph, pw) = nodes[p.0].value.dims4()?;
                if (pn, ph, pw) != (n, h, w) {
                    return Err(shape_err!("concat: mismatched {:?}", nodes[p.0].value.shape()));
                }
                ctot += pc;
            }
            let plane = h * w;
            let mut out = Vec::with_capacity(n * ctot * plane);
            for b in 0..n {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let pc = t.shape()[1];
                    out.extend_from_slice(&t.data()[b * pc * plane..(b + 1) * pc * plane]);
                }
            }
            Tensor::new([n, ctot, h, w], out)?
        };
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `[start, end)` of an `N×C×H×W` tensor.
    pub fn slice_channels(&self, input: Var, start: usize, end: usize) -> Result<Var> {
        let out = {
            let x = self.value(input);
            let (n, c, h, w) = x.dims4()?;
            if start >= end || end > c {
                return Err(shape_err!("channel slice [{start}, {end}) of {c} channels"));
            }
            let plane = h * w;
            let mut out = Vec::with_capacity(n * (end - start) * plane);
            for b in 0..n {
                out.extend_from_slice(&x.data()[(b * c + start) * plane..(b * c + end) * plane]);
            }
            Tensor::new([n, end - start, h, w], out)?
        };
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Slice { input, start, end }, rg))
    }

    pub fn reshape(&self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    /// Flatten `N×…` to `N×D`.
    pub fn flatten(&self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = *shape.first().ok_or_else(|| shape_err!("flatten of a scalar"))?;
        let d = shape[1..].iter().product();
        self.reshape(input, &[n, d])
    }

    /// Per-(item, channel) affine: `out[n,c,:,:] = x[n,c,:,:]·scale[n,c] + shift[n,c]`.
    pub fn channel_affine(&self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let (n, c, h, w) = x.dims4()?;
            for v in [scale, shift] {
                if nodes[v.0].value.shape() != [n, c] {
                    return Err(shape_err!(
                        "channel_affine: modulation {:?} for input {:?}",
                        nodes[v.0].value.shape(),
                        x.shape()
                    ));
                }
            }
            let (s, t) = (nodes[scale.0].value.data(), nodes[shift.0].value.data());
            let plane = h * w;
            let mut out = x.data().to_vec();
            for (p, chunk) in out.chunks_mut(plane).enumerate() {
                for v in chunk.iter_mut() {
                    *v = *v * s[p] + t[p];
                }
            }
            Tensor::new([n, c, h, w], out)?
        };
        let rg = self.needs(&[input, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine { input, scale, shift }, rg))
    }

    /// Gram matrices `F·Fᵀ/(H·W)` of each item: `N×C×H×W → N×C×C`.
    pub fn gram(&self, input: Var) -> Result<Var> {
        let out = {
            let x = self.value(input);
            let (n, c, h, w) = x.dims4()?;
            let hw = h * w;
            if hw == 0 {
                return Err(shape_err!("gram of an empty feature map"));
            }
            let mut out = vec![T::zero(); n * c * c];
            for b in 0..n {
                let f = &x.data()[b * c * hw..(b + 1) * c * hw];
                matmul_acc(c, hw, c, f, false, f, true, &mut out[b * c * c..(b + 1) * c * c], T::zero());
            }
            let inv = T::c(1.0 / hw as f64);
            out.iter_mut().for_each(|v| *v *= inv);
            Tensor::new([n, c, c], out)?
        };
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Gram(input), rg))
    }

    pub fn global_avg_pool(&self, input: Var) -> Result<Var> {
        let out = {
            let x = self.value(input);
            let (n, c, h, w) = x.dims4()?;
            let inv = T::c(1.0 / (h * w) as f64);
            let data = x.data().chunks(h * w).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
            Tensor::new([n, c], data)?
        };
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    /// Scale each row of an `N×D` tensor to unit Euclidean norm.
    pub fn normalize_rows(&self, input: Var, eps: f64) -> Result<Var> {
        let out = {
            let x = self.value(input);
            let d = match x.shape() {
                [_, d] => *d,
                s => return Err(shape_err!("normalize_rows expects N×D, got {s:?}")),
            };
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(d) {
                let r = (row.iter().fold(T::zero(), |a, &v| a + v * v) + T::c(eps)).sqrt();
                row.iter_mut().for_each(|v| *v = *v / r);
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::NormalizeRows { input, eps }, rg))
    }

    /// Repeat a `1×…` tensor `n` times along the batch axis.
    pub fn repeat_batch(&self, input: Var, n: usize) -> Result<Var> {
        let out = {
            let x = self.value(input);
            if x.shape().first() != Some(&1) {
                return Err(shape_err!("repeat_batch expects a leading axis of 1, got {:?}", x.shape()));
            }
            let mut shape = x.shape().to_vec();
            shape[0] = n;
            let mut data = Vec::with_capacity(x.numel() * n);
            for _ in 0..n {
                data.extend_from_slice(x.data());
            }
            Tensor::new(shape, data)?
        };
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::RepeatBatch(input, n), rg))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Gradients of leaves accumulate
    /// across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&self, loss: Var) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            if nodes[loss.0].value.numel() != 1 {
                return Err(shape_err!("backward from non-scalar {:?}", nodes[loss.0].value.shape()));
            }
            let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), T::one()));
            let mut leaf_grads = Vec::new();
            for i in (0..=loss.0).rev() {
                if !nodes[i].requires_grad {
                    continue;
                }
                let Some(g) = grads[i].take() else { continue };
                if let Op::Leaf = nodes[i].op {
                    leaf_grads.push((i, g));
                    continue;
                }
                self.backward_node(&nodes, i, g, &mut grads)?;
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (i, g) in leaf_grads {
            match &mut nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(
        &self,
        nodes: &[Node<T>],
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    acc(*a, unbroadcast(g.clone(), val(*a)));
                }
                if rg(*b) {
                    acc(*b, unbroadcast(g, val(*b)));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    acc(*a, unbroadcast(g.clone(), val(*a)));
                }
                if rg(*b) {
                    acc(*b, unbroadcast(g.map(|v| -v), val(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if rg(*a) {
                    let ga = Tensor::from_fn(g.shape().to_vec(), |k| g.data()[k] * at(tb, k));
                    acc(*a, unbroadcast(ga, ta));
                }
                if rg(*b) {
                    let gb = Tensor::from_fn(g.shape().to_vec(), |k| g.data()[k] * at(ta, k));
                    acc(*b, unbroadcast(gb, tb));
                }
            }
            Op::Scale(a, s) => {
                let s = T::c(*s);
                acc(*a, g.map(|v| v * s));
            }
            Op::Offset(a) => acc(*a, g),
            Op::Abs(a) => {
                let x = val(*a);
                let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * xv.signum()).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LeakyRelu(a, slope) => {
                let s = T::c(*slope);
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * s })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softplus(a) => {
                let x = val(*a);
                let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * sigmoid(xv)).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Log(a) => {
                let x = val(*a);
                let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape().to_vec(), g.item())),
            Op::Mean(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.shape().to_vec(), g.item() / T::c(x.numel() as f64)));
            }
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let x = val(*input);
                let wt = val(*weight);
                let (n, c, h, w) = x.dims4()?;
                let (cout, _, k, _) = wt.dims4()?;
                let (_, _, ho, wo) = out.dims4()?;
                let plane = ho * wo;
                let ckk = c * k * k;
                let mut col = vec![T::zero(); ckk * plane];
                let mut dcol = vec![T::zero(); ckk * plane];
                let mut gw = rg(*weight).then(|| vec![T::zero(); cout * ckk]);
                let mut gx = rg(*input).then(|| vec![T::zero(); n * c * h * w]);
                for b in 0..n {
                    let gs = &g.data()[b * cout * plane..(b + 1) * cout * plane];
                    if let Some(gw) = gw.as_mut() {
                        let xs = &x.data()[b * c * h * w..(b + 1) * c * h * w];
                        im2col(xs, c, h, w, k, *stride, *padding, ho, wo, &mut col);
                        matmul_acc(cout, plane, ckk, gs, false, &col, true, gw, T::one());
                    }
                    if let Some(gx) = gx.as_mut() {
                        matmul_acc(ckk, cout, plane, wt.data(), true, gs, false, &mut dcol, T::zero());
                        let xs = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                        col2im(&dcol, c, h, w, k, *stride, *padding, ho, wo, xs);
                    }
                }
                if let Some(gw) = gw {
                    acc(*weight, Tensor::new(wt.shape().to_vec(), gw)?);
                }
                if let Some(gx) = gx {
                    acc(*input, Tensor::new(x.shape().to_vec(), gx)?);
                }
                if let Some(bv) = bias.filter(|b| rg(*b)) {
                    let mut gb = vec![T::zero(); cout];
                    for (p, chunk) in g.data().chunks(plane).enumerate() {
                        gb[p % cout] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    acc(bv, Tensor::new([cout], gb)?);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let wt = val(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let dout = wt.shape()[0];
                if rg(*input) {
                    let mut gx = vec![T::zero(); n * d];
                    matmul_acc(n, dout, d, g.data(), false, wt.data(), false, &mut gx, T::zero());
                    acc(*input, Tensor::new([n, d], gx)?);
                }
                if rg(*weight) {
                    let mut gw = vec![T::zero(); dout * d];
                    matmul_acc(dout, n, d, g.data(), true, x.data(), false, &mut gw, T::zero());
                    acc(*weight, Tensor::new([dout, d], gw)?);
                }
                if let Some(bv) = bias.filter(|b| rg(*b)) {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(bv, Tensor::new([dout], gb)?);
                }
            }
            Op::Resample { input, plans } => {
                let x = val(*input);
                let (n, c, h, w) = x.dims4()?;
                let (_, _, ho, wo) = out.dims4()?;
                let mut gx = vec![T::zero(); n * c * h * w];
                for b in 0..n {
                    let plan = &plans[if plans.len() == 1 { 0 } else { b }];
                    for ch in 0..c {
                        let p = b * c + ch;
                        plan.apply_transpose(&g.data()[p * ho * wo..(p + 1) * ho * wo], &mut gx[p * h * w..(p + 1) * h * w]);
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::Concat(parts) => {
                let (n, ctot, h, w) = out.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = val(*p).shape()[1];
                    if rg(*p) {
                        let mut gp = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let s = (b * ctot + offset) * plane;
                            gp.extend_from_slice(&g.data()[s..s + pc * plane]);
                        }
                        acc(*p, Tensor::new([n, pc, h, w], gp)?);
                    }
                    offset += pc;
                }
            }
            Op::Slice { input, start, end } => {
                let x = val(*input);
                let (n, c, h, w) = x.dims4()?;
                let plane = h * w;
                let width = (end - start) * plane;
                let mut gx = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    gx[(b * c + start) * plane..(b * c + end) * plane]
                        .copy_from_slice(&g.data()[b * width..(b + 1) * width]);
                }
                acc(*input, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape().to_vec())?),
            Op::ChannelAffine { input, scale, shift } => {
                let x = val(*input);
                let s = val(*scale);
                let (n, c, h, w) = x.dims4()?;
                let plane = h * w;
                if rg(*input) {
                    let mut gx = g.data().to_vec();
                    for (p, chunk) in gx.chunks_mut(plane).enumerate() {
                        let sv = s.data()[p];
                        chunk.iter_mut().for_each(|v| *v *= sv);
                    }
                    acc(*input, Tensor::new(x.shape().to_vec(), gx)?);
                }
                if rg(*scale) {
                    let gs = g
                        .data()
                        .chunks(plane)
                        .zip(x.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv))
                        .collect();
                    acc(*scale, Tensor::new([n, c], gs)?);
                }
                if rg(*shift) {
                    let gt = g.data().chunks(plane).map(|gp| gp.iter().fold(T::zero(), |a, &v| a + v)).collect();
                    acc(*shift, Tensor::new([n, c], gt)?);
                }
            }
            Op::Gram(a) => {
                let x = val(*a);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let inv = T::c(1.0 / hw as f64);
                let mut gx = vec![T::zero(); n * c * hw];
                let mut sym = vec![T::zero(); c * c];
                for b in 0..n {
                    let gb = &g.data()[b * c * c..(b + 1) * c * c];
                    for r in 0..c {
                        for q in 0..c {
                            sym[r * c + q] = (gb[r * c + q] + gb[q * c + r]) * inv;
                        }
                    }
                    let f = &x.data()[b * c * hw..(b + 1) * c * hw];
                    matmul_acc(c, c, hw, &sym, false, f, false, &mut gx[b * c * hw..(b + 1) * c * hw], T::zero());
                }
                acc(*a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::GlobalAvgPool(a) => {
                let x = val(*a);
                let (_, _, h, w) = x.dims4()?;
                let inv = T::c(1.0 / (h * w) as f64);
                let mut gx = Vec::with_capacity(x.numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                acc(*a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::RepeatBatch(a, n) => {
                let x = val(*a);
                let len = x.numel();
                let mut gx = vec![T::zero(); len];
                for b in 0..*n {
                    for (o, &v) in gx.iter_mut().zip(&g.data()[b * len..(b + 1) * len]) {
                        *o += v;
                    }
                }
                acc(*a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::NormalizeRows { input, eps } => {
                let x = val(*input);
                let d = x.shape()[1];
                let mut gx = vec![T::zero(); x.numel()];
                for ((gxr, xr), (gr, yr)) in gx
                    .chunks_mut(d)
                    .zip(x.data().chunks(d))
                    .zip(g.data().chunks(d).zip(out.data().chunks(d)))
                {
                    let r = (xr.iter().fold(T::zero(), |a, &v| a + v * v) + T::c(*eps)).sqrt();
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                    for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / r;
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), gx)?);
            }
        }
        Ok(())
    }
}
