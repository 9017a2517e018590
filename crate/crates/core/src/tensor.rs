//! Dense row-major tensors and the forward kernels used by every block.
//!
//! Shapes are carried explicitly; there is no broadcasting beyond the
//! per-op rules documented on each function. All kernels are direct
//! loops so reference oracles can match them exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;

use crate::error::{invalid, CoreError, Result};

/// Scalar type the whole crate is generic over: f32 for training and
/// benchmarks, f64 for gradient checks and tight-tolerance oracles.
pub trait Real:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short dtype name used by serializers ("f32" / "f64").
    const NAME: &'static str;

    /// Lossy conversion from f64 (exact for f64, rounded for f32).
    fn val(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    /// Widening conversion to f64.
    fn f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }

    /// Bit pattern widened to u64, for bitwise-identity assertions.
    fn bits(self) -> u64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Dense row-major tensor with explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(invalid("from_vec", "zero extent"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
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

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(invalid(
                "reshape",
                format!("{:?} -> {:?} changes volume", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Largest |a - b| over all elements, as f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Relative L-inf distance: max|a-b| / max(max|b|, tiny).
    pub fn rel_linf(&self, reference: &Self) -> f64 {
        let denom = reference
            .data
            .iter()
            .map(|v| v.f64().abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        self.max_abs_diff(reference) / denom
    }

    /// True when both buffers carry identical bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

// ---------------------------------------------------------------------------
// scalar activation kernels (shared by forward ops and tape backward)
// ---------------------------------------------------------------------------

/// ELU(x) + 1: strictly positive kernel feature map.
pub fn elu_plus_one<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

pub fn elu_plus_one_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let a = T::val(0.797_884_560_802_865_4); // sqrt(2/pi)
    let b = T::val(0.044715);
    let u = a * (x + b * x * x * x);
    T::val(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let a = T::val(0.797_884_560_802_865_4);
    let b = T::val(0.044715);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = a * (T::one() + T::val(3.0) * b * x * x);
    T::val(0.5) * (T::one() + t) + T::val(0.5) * x * sech2 * du
}

// ---------------------------------------------------------------------------
// matrix kernels
// ---------------------------------------------------------------------------

/// `a (m x k) * b (k x n) -> (m x n)`. Accumulation order over k is
/// ascending per output element, so a naive i-j-k oracle matches bitwise.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose2<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(invalid("transpose2", "rank-2 tensor required"));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

/// Column sums of a rank-2 tensor, as a `1 x n` row.
pub fn col_sums<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(invalid("col_sums", "rank-2 tensor required"));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); n];
    for i in 0..m {
        for j in 0..n {
            out[j] = out[j] + a.data[i * n + j];
        }
    }
    Tensor::from_vec(&[1, n], out)
}

/// Adds a `1 x n` bias row to every row of `a (m x n)`.
pub fn add_bias<T: Real>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || bias.len() != a.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "add_bias",
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let n = a.cols();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bias.data[i % n])
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(invalid("concat_rows", "no inputs"));
    }
    let n = parts[0].cols();
    let mut rows = 0;
    for p in parts {
        if p.rank() != 2 || p.cols() != n {
            return Err(CoreError::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        rows += p.rows();
    }
    let mut data = Vec::with_capacity(rows * n);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(&[rows, n], data)
}

pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(invalid("concat_cols", "no inputs"));
    }
    let m = parts[0].rows();
    let mut cols = 0;
    for p in parts {
        if p.rank() != 2 || p.rows() != m {
            return Err(CoreError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        cols += p.cols();
    }
    let mut data = Vec::with_capacity(m * cols);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::from_vec(&[m, cols], data)
}

pub fn slice_cols<T: Real>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if a.rank() != 2 || start + len > a.cols() {
        return Err(invalid(
            "slice_cols",
            format!("cols {}..{} out of {:?}", start, start + len, a.shape),
        ));
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for i in 0..a.rows() {
        data.extend_from_slice(&a.row(i)[start..start + len]);
    }
    Tensor::from_vec(&[a.rows(), len], data)
}

/// Row gather; index -1 yields a zero row (used for window padding).
pub fn gather_rows<T: Real>(a: &Tensor<T>, idx: &[isize]) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(invalid("gather_rows", "rank-2 tensor required"));
    }
    let n = a.cols();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        if i < 0 {
            data.extend(core::iter::repeat(T::zero()).take(n));
        } else {
            let i = i as usize;
            if i >= a.rows() {
                return Err(invalid("gather_rows", format!("row {i} out of range")));
            }
            data.extend_from_slice(a.row(i));
        }
    }
    Tensor::from_vec(&[idx.len(), n], data)
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Softmax along `axis`, max-shifted for stability. Every slice along the
/// axis sums to 1 and stays strictly positive.
pub fn softmax_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(invalid("softmax_axis", format!("axis {axis} out of range")));
    }
    let extent = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = T::neg_infinity();
            for e in 0..extent {
                max = max.max(out[base + e * inner]);
            }
            let mut sum = T::zero();
            for e in 0..extent {
                let v = (out[base + e * inner] - max).exp();
                out[base + e * inner] = v;
                sum = sum + v;
            }
            for e in 0..extent {
                out[base + e * inner] = out[base + e * inner] / sum;
            }
        }
    }
    let t = Tensor::from_vec(x.shape(), out)?;
    Ok(t)
}

/// Row softmax of a rank-2 tensor with optional masked columns. Masked
/// columns receive zero weight; at least one column must stay unmasked.
pub fn softmax_rows_masked<T: Real>(
    x: &Tensor<T>,
    masked_cols: Option<&[bool]>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(invalid("softmax_rows", "rank-2 tensor required"));
    }
    let (m, n) = (x.rows(), x.cols());
    if let Some(mask) = masked_cols {
        if mask.len() != n {
            return Err(invalid("softmax_rows", "mask length != cols"));
        }
        if mask.iter().all(|&b| b) {
            return Err(invalid("softmax_rows", "all columns masked"));
        }
    }
    let live = |j: usize| masked_cols.map_or(true, |m| !m[j]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = x.row(i);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if live(j) {
                max = max.max(v);
            }
        }
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if live(j) {
                let e = (v - max).exp();
                out[i * n + j] = e;
                sum = sum + e;
            }
        }
        for j in 0..n {
            out[i * n + j] = out[i * n + j] / sum;
        }
    }
    let t = Tensor::from_vec(&[m, n], out)?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

pub struct NormAux<T> {
    /// Normalized values before the affine map.
    pub xhat: Tensor<T>,
    /// 1 / sqrt(var + eps) per normalized group.
    pub inv_std: Vec<T>,
}

/// Per-row layer normalization of `x (n x d)` with affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    Ok(layer_norm_full(x, gamma, beta, eps)?.0)
}

pub fn layer_norm_full<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormAux<T>)> {
    if x.rank() != 2 || gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let (m, d) = (x.rows(), x.cols());
    let inv_d = T::one() / T::val(d as f64);
    let mut out = vec![T::zero(); m * d];
    let mut xhat = vec![T::zero(); m * d];
    let mut inv_std = vec![T::zero(); m];
    for i in 0..m {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    let out = Tensor::from_vec(&[m, d], out)?;
    Ok((
        out,
        NormAux {
            xhat: Tensor::from_vec(&[m, d], xhat)?,
            inv_std,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch normalization of a `C x H x W` map: per-channel statistics over
/// the spatial extent. Train mode normalizes by batch statistics and
/// updates the running stats in place with the given momentum; eval mode
/// normalizes by the running stats.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    momentum: T,
    eps: T,
    mode: BnMode,
) -> Result<Tensor<T>> {
    match mode {
        BnMode::Train => {
            let (out, _aux, mean, var) = batch_norm_train_full(x, gamma, beta, eps)?;
            for c in 0..mean.len() {
                running_mean.data[c] =
                    (T::one() - momentum) * running_mean.data[c] + momentum * mean[c];
                running_var.data[c] =
                    (T::one() - momentum) * running_var.data[c] + momentum * var[c];
            }
            Ok(out)
        }
        BnMode::Eval => Ok(batch_norm_eval_full(x, gamma, beta, running_mean, running_var, eps)?.0),
    }
}

pub fn batch_norm_train_full<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormAux<T>, Vec<T>, Vec<T>)> {
    if x.rank() != 3 || gamma.len() != x.shape[0] || beta.len() != x.shape[0] {
        return Err(CoreError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let hw = h * w;
    let inv = T::one() / T::val(hw as f64);
    let mut out = vec![T::zero(); c * hw];
    let mut xhat = vec![T::zero(); c * hw];
    let mut inv_std = vec![T::zero(); c];
    let mut means = vec![T::zero(); c];
    let mut vars = vec![T::zero(); c];
    for ch in 0..c {
        let plane = &x.data[ch * hw..(ch + 1) * hw];
        let mut mean = T::zero();
        for &v in plane {
            mean = mean + v;
        }
        mean = mean * inv;
        let mut var = T::zero();
        for &v in plane {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv;
        let is = T::one() / (var + eps).sqrt();
        means[ch] = mean;
        vars[ch] = var;
        inv_std[ch] = is;
        for (i, &v) in plane.iter().enumerate() {
            let hh = (v - mean) * is;
            xhat[ch * hw + i] = hh;
            out[ch * hw + i] = hh * gamma.data[ch] + beta.data[ch];
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    Ok((
        out,
        NormAux {
            xhat: Tensor::from_vec(x.shape(), xhat)?,
            inv_std,
        },
        means,
        vars,
    ))
}

pub fn batch_norm_eval_full<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormAux<T>)> {
    if x.rank() != 3 || gamma.len() != x.shape[0] {
        return Err(CoreError::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    let mut xhat = vec![T::zero(); c * hw];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let is = T::one() / (running_var.data[ch] + eps).sqrt();
        inv_std[ch] = is;
        for i in 0..hw {
            let hh = (x.data[ch * hw + i] - running_mean.data[ch]) * is;
            xhat[ch * hw + i] = hh;
            out[ch * hw + i] = hh * gamma.data[ch] + beta.data[ch];
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), out)?,
        NormAux {
            xhat: Tensor::from_vec(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(invalid("conv", "kernel larger than padded extent"));
    }
    Ok((padded - k) / stride + 1)
}

/// Per-channel 2-D correlation of `x (C x H x W)` with `kernels (C x s x s)`.
/// The kernel size must be odd and `pad` must equal `(s - 1) / 2`.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || kernels.rank() != 3 || kernels.shape[0] != x.shape[0] {
        return Err(CoreError::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: x.shape.clone(),
            rhs: kernels.shape.clone(),
        });
    }
    let s = kernels.shape[1];
    if kernels.shape[2] != s || s % 2 == 0 {
        return Err(invalid("depthwise_conv2d", "kernel must be odd and square"));
    }
    if pad != (s - 1) / 2 {
        return Err(invalid("depthwise_conv2d", "pad must be (s-1)/2"));
    }
    if stride == 0 {
        return Err(invalid("depthwise_conv2d", "stride must be positive"));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let oh = conv_out_extent(h, s, stride, pad)?;
    let ow = conv_out_extent(w, s, stride, pad)?;
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        let kern = &kernels.data[ch * s * s..(ch + 1) * s * s];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for u in 0..s {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for v in 0..s {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc = acc + plane[iy as usize * w + ix as usize] * kern[u * s + v];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Standard 2-D correlation: `x (Cin x H x W)`, `kernels (Cout x Cin x s x s)`,
/// optional per-output-channel bias.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || kernels.rank() != 4 || kernels.shape[1] != x.shape[0] {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape.clone(),
            rhs: kernels.shape.clone(),
        });
    }
    let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, s) = (kernels.shape[0], kernels.shape[2]);
    if kernels.shape[3] != s {
        return Err(invalid("conv2d", "kernel must be square"));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(invalid("conv2d", "bias length != output channels"));
        }
    }
    let oh = conv_out_extent(h, s, stride, pad)?;
    let ow = conv_out_extent(w, s, stride, pad)?;
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        let base = bias.map_or(T::zero(), |b| b.data[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = base;
                for ci in 0..cin {
                    let plane = &x.data[ci * h * w..(ci + 1) * h * w];
                    let kern = &kernels.data[(co * cin + ci) * s * s..(co * cin + ci + 1) * s * s];
                    for u in 0..s {
                        let iy = (oy * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for v in 0..s {
                            let ix = (ox * stride + v) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + plane[iy as usize * w + ix as usize] * kern[u * s + v];
                        }
                    }
                }
                out[co * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

/// Window-mean pooling of `x (C x H x W)`; windows lie fully inside the map.
pub fn avg_pool2d<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(invalid("avg_pool2d", "rank-3 tensor required"));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(invalid("avg_pool2d", "window exceeds extent"));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let inv = T::one() / T::val((k * k) as f64);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for u in 0..k {
                    for v in 0..k {
                        acc = acc + plane[(oy * stride + u) * w + (ox * stride + v)];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Nearest-neighbor upsampling of `x (C x H x W)` by an integer factor.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 || factor == 0 {
        return Err(invalid("upsample_nearest", "rank-3 tensor, factor >= 1"));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[ch * oh * ow + oy * ow + ox] =
                    x.data[ch * h * w + (oy / factor) * w + (ox / factor)];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// `(C x H x W) -> (H*W x C)`: spatial positions become token rows.
pub fn chw_to_tokens<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(invalid("chw_to_tokens", "rank-3 tensor required"));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let hw = h * w;
    let mut out = vec![T::zero(); hw * c];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x.data[ch * hw + p];
        }
    }
    Tensor::from_vec(&[hw, c], out)
}

/// `(H*W x C) -> (C x H x W)`: inverse of [`chw_to_tokens`].
pub fn tokens_to_chw<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.rows() != h * w {
        return Err(invalid("tokens_to_chw", "rows must equal h*w"));
    }
    let c = x.cols();
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = x.data[p * c + ch];
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}
