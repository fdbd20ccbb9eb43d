use std::fmt;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
///
/// 4-D image data follows (batch, channel, height, width) order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    "broadcast",
                    format!("incompatible shapes {a:?} and {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, yielding the
/// offsets into two strided views.
fn for_each_offset2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..n {
        f(lin, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err("item", format!("expected 1 element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, idx: &[usize]) -> T {
        let st = strides(&self.shape);
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let st = strides(&self.shape);
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        let out = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = vec![T::zero(); numel(&out)];
        for_each_offset2(&out, &sa, &sb, |lin, oa, ob| {
            data[lin] = f(self.data[oa], other.data[ob]);
        });
        Ok(Self { shape: out, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sums a broadcast-shaped tensor back down to `shape` (adjoint of broadcasting).
    pub fn reduce_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let out = broadcast_shape(shape, &self.shape)?;
        if out != self.shape {
            return Err(shape_err(
                "reduce_to_shape",
                format!("{:?} does not broadcast to {:?}", shape, self.shape),
            ));
        }
        let st = broadcast_strides(shape, &self.shape);
        let own = strides(&self.shape);
        let mut data = vec![T::zero(); numel(shape)];
        for_each_offset2(&self.shape, &own, &st, |_, o_src, o_dst| {
            data[o_dst] += self.data[o_src];
        });
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.data.len().max(1))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Sum over the listed axes, keeping them as extent-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let out_shape = self.reduced_shape(axes, "sum_axes")?;
        let st = broadcast_strides(&out_shape, &self.shape);
        let own = strides(&self.shape);
        let mut data = vec![T::zero(); numel(&out_shape)];
        for_each_offset2(&self.shape, &own, &st, |_, src, dst| {
            data[dst] += self.data[src];
        });
        Ok(Self { shape: out_shape, data })
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let s = self.sum_axes(axes)?;
        let count = self.data.len() / s.data.len().max(1);
        Ok(s.scale(T::one() / T::from_usize_lossy(count)))
    }

    pub(crate) fn reduced_shape(&self, axes: &[usize], op: &'static str) -> Result<Vec<usize>> {
        let mut out = self.shape.clone();
        for &a in axes {
            if a >= self.rank() {
                return Err(arg_err(op, format!("axis {a} out of range for rank {}", self.rank())));
            }
            if self.shape[a] == 0 {
                return Err(arg_err(op, format!("empty reduction axis {a}")));
            }
            out[a] = 1;
        }
        Ok(out)
    }

    /// Broadcasts `self` to `shape` by materializing repeated values.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shape(&self.shape, shape)?;
        if out != shape {
            return Err(shape_err("broadcast_to", format!("{:?} -> {shape:?}", self.shape)));
        }
        let zero = Self::zeros(shape);
        zero.zip_with(self, |_, b| b)
    }

    /// Generic axis permutation.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(arg_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let own = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let out_strides = strides(&out_shape);
        let mut data = vec![T::zero(); self.data.len()];
        for_each_offset2(&out_shape, &out_strides, &src_strides, |_, dst, src| {
            data[dst] = self.data[src];
        });
        Ok(Self { shape: out_shape, data })
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.rank() || start >= end || end > self.shape[axis] {
            return Err(arg_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {:?}", self.shape),
            ));
        }
        let (outer, n, inner) = axis_blocks(&self.shape, axis);
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = w;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| arg_err("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(arg_err("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {axis}", p.shape, first.shape)));
            }
        }
        let (outer, _, inner) = axis_blocks(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// 2-D `(m,k)·(k,n)` or batched 3-D `(b,m,k)·(b,k,n)` matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (batch, m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); batch * m * n];
        for b in 0..batch {
            gemm_nn(
                &self.data[b * m * k..(b + 1) * m * k],
                &other.data[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if self.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Self { shape, data: out })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(arg_err("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1])),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2])),
        _ => Err(shape_err("matmul", format!("{a:?} x {b:?}"))),
    }
}

/// `out += a(m,k) · b(k,n)`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a(m,k) · b(n,k)ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += a(k,m)ᵀ · b(k,n)`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
