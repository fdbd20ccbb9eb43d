//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! Every operation evaluates eagerly, appends a node holding its output and
//! the ids of its inputs, and rejects non-finite results. Nodes are appended
//! in evaluation order, so the tape is always topologically sorted and a
//! single reverse sweep from the loss reaches every leaf.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::ndtensor::{
    axis_blocks, conv2d_3x3, conv2d_3x3_backward, gemm_nt, gemm_tn, matmul_dims, Tensor,
};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv3x3(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Pow(Var, T),
    Abs(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    LayerNorm(Var, usize, T),
    L2Normalize(Var, usize, T),
    Sum(Var),
    Mean(Var),
    SumAxes(Var),
    MeanAxes(Var, usize),
    MaxAxis(Var, usize),
    MinAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a computation.
pub struct Tape<T = f64> {
    id: u32,
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(Error::UnknownVar(v.idx));
        }
        Ok(self.grads[v.idx]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::UnknownVar(v.idx));
        }
        Ok(())
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Alias of [`Tape::leaf`] for values whose gradient is not needed.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.leaf(Tensor::scalar(v))
    }

    /// Copies `v`'s value into a new leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v)?.item()
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x)?.map(f);
        self.push(out, op, name)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.check(b)?;
        let out = self.value(a)?.zip_with(self.value(b)?, f).map_err(|_| {
            shape_err(
                name,
                format!("{:?} vs {:?}", self.nodes[a.idx].value.shape(), self.nodes[b.idx].value.shape()),
            )
        })?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "neg", |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar(x))
    }

    /// 2-D or batched 3-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        let out = self.value(a)?.matmul(self.value(b)?)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x (B,Cin,H,W)` ⋆ `w (Cout,Cin,3,3)`, stride 1, zero padding 1.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(w)?;
        let out = conv2d_3x3(self.value(x)?, self.value(w)?)?;
        self.push(out, Op::Conv3x3(x, w), "conv2d_3x3")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(x, "leaky_relu", |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sin", |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "cos", |v| v.cos(), Op::Cos(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x)?.data().iter().any(|&v| v < T::zero()) {
            return Err(arg_err("sqrt", "negative input"));
        }
        self.unary(x, "sqrt", |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        self.unary(x, "power", |v| v.powf(p), Op::Pow(x, p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "power", |v| v * v, Op::Pow(x, T::lit(2.0)))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", |v| v.abs(), Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(arg_err("clamp", "min > max"));
        }
        self.unary(x, "clamp", |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    fn check_axis(&self, x: Var, axis: usize, name: &'static str) -> Result<()> {
        let r = self.value(x)?.rank();
        if axis >= r {
            return Err(arg_err(name, format!("axis {axis} out of range for rank {r}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let xv = self.value(x)?;
        let (outer, n, inner) = axis_blocks(xv.shape(), axis);
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).fold(T::neg_infinity(), |m, k| m.max(d[at(k)]));
                let mut s = T::zero();
                for k in 0..n {
                    let e = (d[at(k)] - m).exp();
                    d[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    d[at(k)] /= s;
                }
            }
        }
        self.push(out, Op::Softmax(x, axis), "softmax")
    }

    /// Zero-mean unit-variance normalization along `axis` (population
    /// variance, `eps` inside the square root, no affine part).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis(x, axis, "layer_norm")?;
        let (out, _) = layer_norm_fwd(self.value(x)?, axis, eps);
        self.push(out, Op::LayerNorm(x, axis, eps), "layer_norm")
    }

    /// `x / sqrt(Σx² + eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis(x, axis, "l2_normalize")?;
        let (out, _) = l2_fwd(self.value(x)?, axis, eps);
        self.push(out, Op::L2Normalize(x, axis, eps), "l2_normalize")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        if xv.is_empty() {
            return Err(arg_err("mean", "empty tensor"));
        }
        let m = xv.mean();
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    /// Sum over `axes`, keeping them as extent-1 dims.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x)?.sum_axes(axes)?;
        self.push(out, Op::SumAxes(x), "sum_axes")
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x)?;
        let out = xv.mean_axes(axes)?;
        let count = xv.len() / out.len().max(1);
        self.push(out, Op::MeanAxes(x, count), "mean_axes")
    }

    /// Max along `axis` (kept as extent 1). Ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "max_axis")?;
        let out = extreme_axis(self.value(x)?, axis, true).0;
        self.push(out, Op::MaxAxis(x, axis), "max_axis")
    }

    /// Min along `axis` (kept as extent 1). Ties resolve to the lowest index.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "min_axis")?;
        let out = extreme_axis(self.value(x)?, axis, false).0;
        self.push(out, Op::MinAxis(x, axis), "min_axis")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.idx].value).collect();
        let out = Tensor::concat(&values, axis)?;
        self.push(out, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x)?.slice_axis(axis, start, end)?;
        self.push(out, Op::Slice(x, axis, start), "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x)?.reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x)?.permute(perm)?;
        self.push(out, Op::Permute(x, perm.to_vec()), "permute")
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = &self.nodes[loss.idx].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &g)?;
            grads[idx] = Some(g);
            for (v, dg) in contributions {
                match &mut grads[v.idx] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx].value
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &node.value;
        let zero = T::zero();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, g.reduce_to_shape(self.val(*a).shape())?),
                (*b, g.reduce_to_shape(self.val(*b).shape())?),
            ],
            Op::Sub(a, b) => vec![
                (*a, g.reduce_to_shape(self.val(*a).shape())?),
                (*b, g.map(|v| -v).reduce_to_shape(self.val(*b).shape())?),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                vec![
                    (*a, g.mul(bv)?.reduce_to_shape(av.shape())?),
                    (*b, g.mul(av)?.reduce_to_shape(bv.shape())?),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let ga = g.div(bv)?.reduce_to_shape(av.shape())?;
                let gb = g.mul(out)?.div(bv)?.map(|v| -v).reduce_to_shape(bv.shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Scale(x, c) => {
                let c = *c;
                vec![(*x, g.map(|v| v * c))]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape())?;
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for bi in 0..batch {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    gemm_nt(
                        gs,
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    gemm_tn(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        gs,
                        &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv3x3(x, w) => {
                let (gx, gw) = conv2d_3x3_backward(self.val(*x), self.val(*w), g)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::Relu(x) => vec![(*x, g.zip_with(self.val(*x), |gv, xv| if xv > zero { gv } else { zero })?)],
            Op::LeakyRelu(x, s) => {
                let s = *s;
                vec![(*x, g.zip_with(self.val(*x), |gv, xv| if xv > zero { gv } else { gv * s })?)]
            }
            Op::Exp(x) => vec![(*x, g.mul(out)?)],
            Op::Sin(x) => vec![(*x, g.zip_with(self.val(*x), |gv, xv| gv * xv.cos())?)],
            Op::Cos(x) => vec![(*x, g.zip_with(self.val(*x), |gv, xv| -gv * xv.sin())?)],
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                vec![(*x, g.zip_with(out, |gv, y| gv * half / y)?)]
            }
            Op::Pow(x, p) => {
                let p = *p;
                vec![(*x, g.zip_with(self.val(*x), |gv, xv| gv * p * xv.powf(p - T::one()))?)]
            }
            Op::Abs(x) => vec![(*x, g.zip_with(self.val(*x), |gv, xv| if xv > zero {
                gv
            } else if xv < zero {
                -gv
            } else {
                zero
            })?)],
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(*x, g.zip_with(self.val(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { zero })?)]
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_blocks(out.shape(), *axis);
                let mut gx = Tensor::zeros(out.shape());
                let (y, gd, d) = (out.data(), g.data(), gx.data_mut());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm(x, axis, eps) => {
                let (y, inv_std) = layer_norm_fwd(self.val(*x), *axis, *eps);
                let (outer, n, inner) = axis_blocks(y.shape(), *axis);
                let nf = T::from_usize_lossy(n);
                let mut gx = Tensor::zeros(y.shape());
                let (yd, gd, d) = (y.data(), g.data(), gx.data_mut());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mg: T = (0..n).map(|k| gd[at(k)]).sum::<T>() / nf;
                        let mgy: T = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum::<T>() / nf;
                        let s = inv_std[o * inner + i];
                        for k in 0..n {
                            d[at(k)] = s * (gd[at(k)] - mg - yd[at(k)] * mgy);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::L2Normalize(x, axis, eps) => {
                let (y, inv_norm) = l2_fwd(self.val(*x), *axis, *eps);
                let (outer, n, inner) = axis_blocks(y.shape(), *axis);
                let mut gx = Tensor::zeros(y.shape());
                let (yd, gd, d) = (y.data(), g.data(), gx.data_mut());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        let s = inv_norm[o * inner + i];
                        for k in 0..n {
                            d[at(k)] = s * (gd[at(k)] - yd[at(k)] * dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.val(*x).shape(), g.data()[0]))],
            Op::Mean(x) => {
                let xv = self.val(*x);
                let v = g.data()[0] / T::from_usize_lossy(xv.len());
                vec![(*x, Tensor::full(xv.shape(), v))]
            }
            Op::SumAxes(x) => vec![(*x, g.broadcast_to(self.val(*x).shape())?)],
            Op::MeanAxes(x, count) => {
                let c = T::one() / T::from_usize_lossy(*count);
                vec![(*x, g.broadcast_to(self.val(*x).shape())?.scale(c))]
            }
            Op::MaxAxis(x, axis) | Op::MinAxis(x, axis) => {
                let is_max = matches!(node.op, Op::MaxAxis(..));
                let xv = self.val(*x);
                let (_, arg) = extreme_axis(xv, *axis, is_max);
                let (outer, n, inner) = axis_blocks(xv.shape(), *axis);
                let mut gx = Tensor::zeros(xv.shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let k = arg[o * inner + i];
                        d[(o * n + k) * inner + i] = g.data()[o * inner + i];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = self.val(*p).shape()[*axis];
                    res.push((*p, g.slice_axis(*axis, start, start + w)?));
                    start += w;
                }
                res
            }
            Op::Slice(x, axis, start) => {
                let xv = self.val(*x);
                let (outer, n, inner) = axis_blocks(xv.shape(), *axis);
                let w = g.shape()[*axis];
                let mut gx = Tensor::zeros(xv.shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    let src = &g.data()[o * w * inner..(o + 1) * w * inner];
                    let base = (o * n + start) * inner;
                    d[base..base + w * inner].copy_from_slice(src);
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.val(*x).shape())?)],
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
        })
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::Conv3x3(..) => "conv2d_3x3",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Exp(..) => "exp",
        Op::Sin(..) => "sin",
        Op::Cos(..) => "cos",
        Op::Sqrt(..) => "sqrt",
        Op::Pow(..) => "power",
        Op::Abs(..) => "abs",
        Op::Clamp(..) => "clamp",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm(..) => "layer_norm",
        Op::L2Normalize(..) => "l2_normalize",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAxes(..) => "sum_axes",
        Op::MeanAxes(..) => "mean_axes",
        Op::MaxAxis(..) => "max_axis",
        Op::MinAxis(..) => "min_axis",
        Op::Concat(..) => "concat",
        Op::Slice(..) => "slice",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
    }
}

/// Normalized output plus `1/σ` per reduced lane.
fn layer_norm_fwd<T: Scalar>(x: &Tensor<T>, axis: usize, eps: T) -> (Tensor<T>, Vec<T>) {
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let nf = T::from_usize_lossy(n);
    let mut out = x.clone();
    let mut inv = vec![T::zero(); outer * inner];
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mu: T = (0..n).map(|k| d[at(k)]).sum::<T>() / nf;
            let var: T = (0..n).map(|k| (d[at(k)] - mu) * (d[at(k)] - mu)).sum::<T>() / nf;
            let s = T::one() / (var + eps).sqrt();
            for k in 0..n {
                d[at(k)] = (d[at(k)] - mu) * s;
            }
            inv[o * inner + i] = s;
        }
    }
    (out, inv)
}

fn l2_fwd<T: Scalar>(x: &Tensor<T>, axis: usize, eps: T) -> (Tensor<T>, Vec<T>) {
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let mut out = x.clone();
    let mut inv = vec![T::zero(); outer * inner];
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let ss: T = (0..n).map(|k| d[at(k)] * d[at(k)]).sum();
            let s = T::one() / (ss + eps).sqrt();
            for k in 0..n {
                d[at(k)] *= s;
            }
            inv[o * inner + i] = s;
        }
    }
    (out, inv)
}

fn extreme_axis<T: Scalar>(x: &Tensor<T>, axis: usize, is_max: bool) -> (Tensor<T>, Vec<usize>) {
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    let mut out = Tensor::zeros(&shape);
    let mut arg = vec![0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            for k in 1..n {
                let (v, b) = (d[(o * n + k) * inner + i], d[(o * n + best) * inner + i]);
                if (is_max && v > b) || (!is_max && v < b) {
                    best = k;
                }
            }
            arg[o * inner + i] = best;
            out.data_mut()[o * inner + i] = d[(o * n + best) * inner + i];
        }
    }
    (out, arg)
}
