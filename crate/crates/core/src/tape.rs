//! Reverse-mode autodiff over the tensor kernels.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; parents
//! always precede children, so [`Tape::backward`] is a single reverse
//! sweep. Forward values are computed by the pure kernels in
//! [`crate::tensor`], keeping tape results bit-identical to the
//! hand-composed oracles used in tests.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose2 {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Phi {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        kernels: Var,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    ChwToTokens {
        x: Var,
    },
    TokensToChw {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    ConcatCols {
        xs: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<isize>,
    },
    ColSums {
        x: Var,
    },
    DivByColEps {
        num: Var,
        den: Var,
        eps: T,
    },
    MeanAll {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    L1Loss {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-node gradients produced by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient but is bound to nothing.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf bound to a stored parameter; [`Tape::accumulate_param_grads`]
    /// adds its gradient back into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = tensor::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let v = tensor::transpose2(self.value(x))?;
        Ok(self.push(v, Op::Transpose2 { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::relu);
        self.push(v, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::gelu);
        self.push(v, Op::Gelu { x })
    }

    /// ELU(x)+1 feature map.
    pub fn phi(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::elu_plus_one);
        self.push(v, Op::Phi { x })
    }

    pub fn softmax_rows(&mut self, x: Var, masked_cols: Option<Vec<bool>>) -> Result<Var> {
        let v = tensor::softmax_rows_masked(self.value(x), masked_cols.as_deref())?;
        Ok(self.push(v, Op::SoftmaxRows { x }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (v, aux) =
            tensor::layer_norm_full(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: aux.xhat,
                inv_std: aux.inv_std,
            },
        ))
    }

    /// Train-mode batch norm over a `C x H x W` map. Returns the output
    /// plus the batch statistics so callers can update running state.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (v, aux, mean, var) =
            tensor::batch_norm_train_full(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let out = self.push(
            v,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat: aux.xhat,
                inv_std: aux.inv_std,
            },
        );
        Ok((out, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let (v, aux) = tensor::batch_norm_eval_full(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat: aux.xhat,
                inv_std: aux.inv_std,
            },
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        kernels: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let v = tensor::depthwise_conv2d(self.value(x), self.value(kernels), stride, pad)?;
        Ok(self.push(
            v,
            Op::DepthwiseConv {
                x,
                kernels,
                stride,
                pad,
            },
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let v = tensor::conv2d(
            self.value(x),
            self.value(kernels),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                kernels,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let v = tensor::avg_pool2d(self.value(x), k, stride)?;
        Ok(self.push(v, Op::AvgPool { x, k, stride }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = tensor::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(v, Op::UpsampleNearest { x, factor }))
    }

    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let v = tensor::chw_to_tokens(self.value(x))?;
        Ok(self.push(v, Op::ChwToTokens { x }))
    }

    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = tensor::tokens_to_chw(self.value(x), h, w)?;
        Ok(self.push(v, Op::TokensToChw { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let v = tensor::concat_rows(&parts)?;
        Ok(self.push(v, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let v = tensor::concat_cols(&parts)?;
        Ok(self.push(v, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_cols(self.value(x), start, len)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[isize]) -> Result<Var> {
        let v = tensor::gather_rows(self.value(x), idx)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn col_sums(&mut self, x: Var) -> Result<Var> {
        let v = tensor::col_sums(self.value(x))?;
        Ok(self.push(v, Op::ColSums { x }))
    }

    /// `out[i][j] = num[i][j] / (den[i][0] + eps)`; `den` is `n x 1`.
    pub fn div_by_col_eps(&mut self, num: Var, den: Var, eps: T) -> Result<Var> {
        let nv = self.value(num);
        let dv = self.value(den);
        if nv.rank() != 2 || dv.rank() != 2 || dv.cols() != 1 || dv.rows() != nv.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "div_by_col_eps",
                lhs: nv.shape().to_vec(),
                rhs: dv.shape().to_vec(),
            });
        }
        let (m, n) = (nv.rows(), nv.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let inv = T::one() / (dv.data()[i] + eps);
            for j in 0..n {
                out[i * n + j] = nv.data()[i * n + j] * inv;
            }
        }
        let v = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(v, Op::DivByColEps { num, den, eps }))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let inv = T::one() / T::val(xv.len() as f64);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc * inv), Op::MeanAll { x })
    }

    /// Mean cross-entropy of `C x H x W` logits against per-pixel class
    /// indices; softmax is taken over the channel axis.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 3 {
            return Err(invalid("cross_entropy", "rank-3 logits required"));
        }
        let (c, h, w) = (lv.shape()[0], lv.shape()[1], lv.shape()[2]);
        let hw = h * w;
        if targets.len() != hw {
            return Err(invalid("cross_entropy", "targets must cover every pixel"));
        }
        if targets.iter().any(|&t| t >= c) {
            return Err(invalid("cross_entropy", "class index out of range"));
        }
        // log-sum-exp form: loss accumulates -(x_t - m - ln sum exp(x - m))
        let probs = tensor::softmax_axis(lv, 0)?;
        let mut acc = T::zero();
        for (p, &t) in targets.iter().enumerate() {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(lv.data()[ch * hw + p]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                sum = sum + (lv.data()[ch * hw + p] - m).exp();
            }
            acc = acc - (lv.data()[t * hw + p] - m - sum.ln());
        }
        let loss = acc / T::val(hw as f64);
        if !loss.is_finite() {
            return Err(CoreError::NonFinite {
                op: "cross_entropy",
            });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean absolute error against a constant target of identical shape.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "l1_loss",
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let inv = T::one() / T::val(pv.len() as f64);
        let mut acc = T::zero();
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            acc = acc + (p - t).abs();
        }
        let loss = acc * inv;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite { op: "l1_loss" });
        }
        Ok(self.push(Tensor::scalar(loss), Op::L1Loss { pred, target }))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(invalid("backward", "root must be scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds every param-bound leaf gradient into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.add_to_grad(id, g);
                }
            }
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let add_into =
            |grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>| match &mut grads[v.0] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), delta.shape());
                    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + d;
                    }
                }
                slot @ None => *slot = Some(delta),
            };

        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.clone());
            }
            Op::AddBias { x, bias } => {
                add_into(grads, *x, g.clone());
                let sums = tensor::col_sums(g)?;
                add_into(grads, *bias, sums.reshaped(self.value(*bias).shape())?);
            }
            Op::Scale { x, c } => add_into(grads, *x, g.scale(*c)),
            Op::Matmul { a, b } => {
                let bt = tensor::transpose2(self.value(*b))?;
                let at = tensor::transpose2(self.value(*a))?;
                add_into(grads, *a, tensor::matmul(g, &bt)?);
                add_into(grads, *b, tensor::matmul(&at, g)?);
            }
            Op::Transpose2 { x } => add_into(grads, *x, tensor::transpose2(g)?),
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                add_into(grads, *x, Tensor::from_vec(xv.shape(), data)?);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * tensor::gelu_grad(x))
                    .collect();
                add_into(grads, *x, Tensor::from_vec(xv.shape(), data)?);
            }
            Op::Phi { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * tensor::elu_plus_one_grad(x))
                    .collect();
                add_into(grads, *x, Tensor::from_vec(xv.shape(), data)?);
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let mut dot = T::zero();
                    for c in 0..n {
                        dot = dot + g.data()[r * n + c] * y.data()[r * n + c];
                    }
                    for c in 0..n {
                        let yv = y.data()[r * n + c];
                        dx[r * n + c] = yv * (g.data()[r * n + c] - dot);
                    }
                }
                add_into(grads, *x, Tensor::from_vec(y.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (m, d) = (xhat.rows(), xhat.cols());
                let inv_d = T::one() / T::val(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); m * d];
                for r in 0..m {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        let gi = g.data()[r * d + c];
                        let h = xhat.data()[r * d + c];
                        dgamma[c] = dgamma[c] + gi * h;
                        dbeta[c] = dbeta[c] + gi;
                        let dh = gi * gv.data()[c];
                        m1 = m1 + dh;
                        m2 = m2 + dh * h;
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for c in 0..d {
                        let h = xhat.data()[r * d + c];
                        let dh = g.data()[r * d + c] * gv.data()[c];
                        dx[r * d + c] = inv_std[r] * (dh - m1 - h * m2);
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xhat.shape(), dx)?);
                add_into(grads, *gamma, Tensor::from_vec(gv.shape(), dgamma)?);
                add_into(
                    grads,
                    *beta,
                    Tensor::from_vec(self.value(*beta).shape(), dbeta)?,
                );
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (c, h, w) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2]);
                let hw = h * w;
                let inv_hw = T::one() / T::val(hw as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); c * hw];
                for ch in 0..c {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for p in 0..hw {
                        let gi = g.data()[ch * hw + p];
                        let hh = xhat.data()[ch * hw + p];
                        dgamma[ch] = dgamma[ch] + gi * hh;
                        dbeta[ch] = dbeta[ch] + gi;
                        let dh = gi * gv.data()[ch];
                        m1 = m1 + dh;
                        m2 = m2 + dh * hh;
                    }
                    m1 = m1 * inv_hw;
                    m2 = m2 * inv_hw;
                    for p in 0..hw {
                        let hh = xhat.data()[ch * hw + p];
                        let dh = g.data()[ch * hw + p] * gv.data()[ch];
                        dx[ch * hw + p] = inv_std[ch] * (dh - m1 - hh * m2);
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xhat.shape(), dx)?);
                add_into(grads, *gamma, Tensor::from_vec(gv.shape(), dgamma)?);
                add_into(
                    grads,
                    *beta,
                    Tensor::from_vec(self.value(*beta).shape(), dbeta)?,
                );
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (c, h, w) = (xhat.shape()[0], xhat.shape()[1], xhat.shape()[2]);
                let hw = h * w;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        let gi = g.data()[ch * hw + p];
                        dgamma[ch] = dgamma[ch] + gi * xhat.data()[ch * hw + p];
                        dbeta[ch] = dbeta[ch] + gi;
                        dx[ch * hw + p] = gi * gv.data()[ch] * inv_std[ch];
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xhat.shape(), dx)?);
                add_into(grads, *gamma, Tensor::from_vec(gv.shape(), dgamma)?);
                add_into(
                    grads,
                    *beta,
                    Tensor::from_vec(self.value(*beta).shape(), dbeta)?,
                );
            }
            Op::DepthwiseConv {
                x,
                kernels,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let kv = self.value(*kernels);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let s = kv.shape()[1];
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut dx = vec![T::zero(); c * h * w];
                let mut dk = vec![T::zero(); c * s * s];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[ch * oh * ow + oy * ow + ox];
                            for u in 0..s {
                                let iy = (oy * stride + u) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for v in 0..s {
                                    let ix = (ox * stride + v) as isize - *pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ch * h * w + iy as usize * w + ix as usize;
                                    dx[xi] = dx[xi] + go * kv.data()[ch * s * s + u * s + v];
                                    dk[ch * s * s + u * s + v] =
                                        dk[ch * s * s + u * s + v] + go * xv.data()[xi];
                                }
                            }
                        }
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                add_into(grads, *kernels, Tensor::from_vec(kv.shape(), dk)?);
            }
            Op::Conv2d {
                x,
                kernels,
                bias,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let kv = self.value(*kernels);
                let (cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, s) = (kv.shape()[0], kv.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut dx = vec![T::zero(); cin * h * w];
                let mut dk = vec![T::zero(); cout * cin * s * s];
                let mut db = vec![T::zero(); cout];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[co * oh * ow + oy * ow + ox];
                            db[co] = db[co] + go;
                            for ci in 0..cin {
                                let kbase = (co * cin + ci) * s * s;
                                for u in 0..s {
                                    let iy = (oy * stride + u) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for v in 0..s {
                                        let ix = (ox * stride + v) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ci * h * w + iy as usize * w + ix as usize;
                                        dx[xi] = dx[xi] + go * kv.data()[kbase + u * s + v];
                                        dk[kbase + u * s + v] =
                                            dk[kbase + u * s + v] + go * xv.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
                add_into(grads, *kernels, Tensor::from_vec(kv.shape(), dk)?);
                if let Some(b) = bias {
                    add_into(grads, *b, Tensor::from_vec(self.value(*b).shape(), db)?);
                }
            }
            Op::AvgPool { x, k, stride } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let inv = T::one() / T::val((k * k) as f64);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[ch * oh * ow + oy * ow + ox] * inv;
                            for u in 0..*k {
                                for v in 0..*k {
                                    let xi = ch * h * w + (oy * stride + u) * w + (ox * stride + v);
                                    dx[xi] = dx[xi] + go;
                                }
                            }
                        }
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::UpsampleNearest { x, factor } => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let xi = ch * h * w + (oy / factor) * w + (ox / factor);
                            dx[xi] = dx[xi] + g.data()[ch * oh * ow + oy * ow + ox];
                        }
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::ChwToTokens { x } => {
                let xv = self.value(*x);
                add_into(
                    grads,
                    *x,
                    tensor::tokens_to_chw(g, xv.shape()[1], xv.shape()[2])?,
                );
            }
            Op::TokensToChw { x } => {
                add_into(grads, *x, tensor::chw_to_tokens(g)?);
            }
            Op::Reshape { x } => {
                add_into(grads, *x, g.reshaped(self.value(*x).shape())?);
            }
            Op::ConcatRows { xs } => {
                let n = g.cols();
                let mut row = 0;
                for &xv in xs {
                    let r = self.value(xv).rows();
                    let part = g.data()[row * n..(row + r) * n].to_vec();
                    add_into(grads, xv, Tensor::from_vec(&[r, n], part)?);
                    row += r;
                }
            }
            Op::ConcatCols { xs } => {
                let m = g.rows();
                let total = g.cols();
                let mut start = 0;
                for &xv in xs {
                    let c = self.value(xv).cols();
                    let mut part = Vec::with_capacity(m * c);
                    for r in 0..m {
                        part.extend_from_slice(&g.data()[r * total + start..r * total + start + c]);
                    }
                    add_into(grads, xv, Tensor::from_vec(&[m, c], part)?);
                    start += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..len {
                        dx[r * n + start + c] = g.data()[r * len + c];
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = vec![T::zero(); xv.rows() * n];
                for (r, &i) in idx.iter().enumerate() {
                    if i >= 0 {
                        let i = i as usize;
                        for c in 0..n {
                            dx[i * n + c] = dx[i * n + c] + g.data()[r * n + c];
                        }
                    }
                }
                add_into(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::ColSums { x } => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend_from_slice(g.data());
                }
                add_into(grads, *x, Tensor::from_vec(&[m, n], dx)?);
            }
            Op::DivByColEps { num, den, eps } => {
                let nv = self.value(*num);
                let dv = self.value(*den);
                let (m, n) = (nv.rows(), nv.cols());
                let mut dnum = vec![T::zero(); m * n];
                let mut dden = vec![T::zero(); m];
                for r in 0..m {
                    let inv = T::one() / (dv.data()[r] + *eps);
                    let mut acc = T::zero();
                    for c in 0..n {
                        let gi = g.data()[r * n + c];
                        dnum[r * n + c] = gi * inv;
                        acc = acc + gi * nv.data()[r * n + c];
                    }
                    dden[r] = -acc * inv * inv;
                }
                add_into(grads, *num, Tensor::from_vec(nv.shape(), dnum)?);
                add_into(grads, *den, Tensor::from_vec(dv.shape(), dden)?);
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                let go = g.item() / T::val(xv.len() as f64);
                add_into(grads, *x, Tensor::filled(xv.shape(), go));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let hw = targets.len();
                let c = probs.shape()[0];
                let go = g.item() / T::val(hw as f64);
                let mut dl = vec![T::zero(); c * hw];
                for (p, &t) in targets.iter().enumerate() {
                    for ch in 0..c {
                        let onehot = if ch == t { T::one() } else { T::zero() };
                        dl[ch * hw + p] = go * (probs.data()[ch * hw + p] - onehot);
                    }
                }
                add_into(
                    grads,
                    *logits,
                    Tensor::from_vec(self.value(*logits).shape(), dl)?,
                );
            }
            Op::L1Loss { pred, target } => {
                let pv = self.value(*pred);
                let go = g.item() / T::val(pv.len() as f64);
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if p > t {
                            go
                        } else if p < t {
                            -go
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                add_into(grads, *pred, Tensor::from_vec(pv.shape(), data)?);
            }
        }
        Ok(())
    }
}
