//! Dense row-major tensors and the forward kernels the head is built from.
//!
//! Spatial tensors are channels-first (`C×H×W`). Every public kernel checks
//! that its output is finite and reports a [`TensorError::NonFinite`] instead
//! of propagating NaN or infinity.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Converts an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::BadShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Tensor { shape, data }.finite("new")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Tensor {
            shape,
            data: vec![value; n],
        }
        .finite("full")
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    /// Builds a tensor by evaluating `f` at each flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        let data = (0..n).map(f).collect();
        Tensor { shape, data }.finite("from_fn")
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view for in-place parameter updates. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::invalid(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::invalid(
                op,
                format!("expected C×H×W, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index out of bounds");
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(TensorError::mismatch("reshape", &self.shape, &shape));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).expect("cast"))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .finite("map")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Rows `[start, end)` of the leading axis as a new tensor.
    pub fn slice_axis0(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(TensorError::invalid(
                "slice_axis0",
                format!("range {start}..{end} outside extent {}", self.shape[0]),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `C = A·B` for `A: m×k`, `B: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_parts_unchecked(vec![m, n], out).finite("matmul")
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(d[i * n + j]);
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, m], out))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let x = x.clone().finite("softmax_rows")?;
    let (m, n) = x.dims2("softmax_rows")?;
    let mut out = x.into_data();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::from_parts_unchecked(vec![m, n], out).finite("softmax_rows")
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` evaluated as `log1p(exp(-|x|)) + max(x, 0)`.
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    (-x.abs()).exp().ln_1p() + x.max(T::zero())
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(softplus_scalar)
}

pub(crate) struct LayerNormStats<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let (m, d) = x.dims2("layer_norm")?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::mismatch("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= T::zero() {
        return Err(TensorError::invalid("layer_norm", "eps must be positive"));
    }
    let dn = T::from_usize(d).unwrap();
    let xd = x.data();
    let mut normalized = Vec::with_capacity(m * d);
    let mut inv_std = Vec::with_capacity(m);
    let mut out = Vec::with_capacity(m * d);
    for i in 0..m {
        let row = &xd[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * istd;
            normalized.push(xh);
            out.push(xh * gain.data()[j] + bias.data()[j]);
        }
    }
    let y = Tensor::from_parts_unchecked(vec![m, d], out).finite("layer_norm")?;
    Ok((y, LayerNormStats { normalized, inv_std }))
}

/// Per-row normalization (population variance over the row) followed by `gain`/`bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

/// Returns the pooled tensor and, per output cell, the flat input index of the
/// first maximal element in scan order.
pub(crate) fn max_pool2d_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = x.dims3("max_pool2d")?;
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(TensorError::invalid(
            "max_pool2d",
            format!("{h}×{w} is not divisible into {out_h}×{out_w} windows"),
        ));
    }
    let (kh, kw) = (h / out_h, w / out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut arg = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for oi in 0..out_h {
            for oj in 0..out_w {
                let mut best = base + oi * kh * w + oj * kw;
                for di in 0..kh {
                    for dj in 0..kw {
                        let idx = base + (oi * kh + di) * w + oj * kw + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    let y = Tensor::from_parts_unchecked(vec![c, out_h, out_w], out).finite("max_pool2d")?;
    Ok((y, arg))
}

/// Max pooling over disjoint windows of size `H/out_h × W/out_w`.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    max_pool2d_with_argmax(x, out_h, out_w).map(|(y, _)| y)
}

/// Channel means of a `C×H×W` tensor.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("global_avg_pool")?;
    let hw = h * w;
    let scale = T::one() / T::from_usize(hw).unwrap();
    let out = x
        .data()
        .chunks(hw)
        .map(|ch| ch.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_parts_unchecked(vec![c], out).finite("global_avg_pool")
}

/// Concatenates along the leading axis; trailing extents must agree.
pub fn concat_axis0<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(TensorError::mismatch("concat", first.shape(), p.shape()));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = lead;
    Ok(Tensor::from_parts_unchecked(shape, data))
}
