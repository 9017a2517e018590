//! Small parameterized layers shared by the attention blocks and the
//! pipeline decoders. Each wraps ParamStore handles plus the tape calls
//! to apply them.

use alloc::format;
use alloc::string::String;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
// float intrinsics in no_std builds; std test builds shadow it
use crate::{Phase, BN_MOMENTUM, NORM_EPS};
#[allow(unused_imports)]
use num_traits::Float;

/// Linear layer `x W (+ b)` on token rows.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add_normal(&format!("{name}.w"), &[d_in, d_out], std, rng)?;
        let b = if bias {
            Some(store.add_zeros(&format!("{name}.b"), &[d_out])?)
        } else {
            None
        };
        Ok(Dense { w, b })
    }

    /// Weight-only layer initialized to zeros (used where tests rely on a
    /// uniform starting state).
    pub fn new_zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add_zeros(&format!("{name}.w"), &[d_in, d_out])?;
        let b = if bias {
            Some(store.add_zeros(&format!("{name}.b"), &[d_out])?)
        } else {
            None
        };
        Ok(Dense { w, b })
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bv = tape.param(store, b);
                tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Pure forward with the stored weights; mirrors [`Dense::apply`].
    pub fn apply_pure<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = crate::tensor::matmul(x, store.value(self.w))?;
        match self.b {
            Some(b) => crate::tensor::add_bias(&y, store.value(b)),
            None => Ok(y),
        }
    }
}

/// Layer norm with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_filled(&format!("{name}.gamma"), &[d], 1.0)?,
            beta: store.add_zeros(&format!("{name}.beta"), &[d])?,
        })
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::val(NORM_EPS))
    }

    pub fn apply_pure<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::tensor::layer_norm(
            x,
            store.value(self.gamma),
            store.value(self.beta),
            T::val(NORM_EPS),
        )
    }
}

/// Batch norm with running statistics kept as non-trainable state.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add_filled(&format!("{name}.gamma"), &[c], 1.0)?,
            beta: store.add_zeros(&format!("{name}.beta"), &[c])?,
            running_mean: store.add_state(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            running_var: store.add_state(
                &format!("{name}.running_var"),
                Tensor::filled(&[c], T::val(1.0)),
            )?,
        })
    }

    /// Train mode normalizes by batch statistics and folds them into the
    /// running state; eval mode normalizes by the running state.
    pub fn apply<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match phase {
            Phase::Train => {
                let (out, mean, var) = tape.batch_norm_train(x, g, b, T::val(NORM_EPS))?;
                let mom = T::val(BN_MOMENTUM);
                let rm = store.get_mut(self.running_mean);
                for (dst, &m) in rm.value.data_mut().iter_mut().zip(&mean) {
                    *dst = (T::one() - mom) * *dst + mom * m;
                }
                let rv = store.get_mut(self.running_var);
                for (dst, &v) in rv.value.data_mut().iter_mut().zip(&var) {
                    *dst = (T::one() - mom) * *dst + mom * v;
                }
                Ok(out)
            }
            Phase::Eval => {
                let rm = store.value(self.running_mean).clone();
                let rv = store.value(self.running_var).clone();
                tape.batch_norm_eval(x, g, b, &rm, &rv, T::val(NORM_EPS))
            }
        }
    }

    /// Pure forward; train mode uses batch statistics without touching
    /// the running state (the oracle recomposition must not mutate).
    pub fn apply_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        phase: Phase,
    ) -> Result<Tensor<T>> {
        match phase {
            Phase::Train => {
                let (out, ..) = crate::tensor::batch_norm_train_full(
                    x,
                    store.value(self.gamma),
                    store.value(self.beta),
                    T::val(NORM_EPS),
                )?;
                Ok(out)
            }
            Phase::Eval => {
                let (out, _) = crate::tensor::batch_norm_eval_full(
                    x,
                    store.value(self.gamma),
                    store.value(self.beta),
                    store.value(self.running_mean),
                    store.value(self.running_var),
                    T::val(NORM_EPS),
                )?;
                Ok(out)
            }
        }
    }
}

/// Conv2d layer (full, not depthwise) with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernels: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let kernels = store.add_normal(&format!("{name}.k"), &[c_out, c_in, k, k], std, rng)?;
        let bias = Some(store.add_zeros(&format!("{name}.b"), &[c_out])?);
        Ok(Conv2d {
            kernels,
            bias,
            stride,
            pad,
        })
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernels);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, k, b, self.stride, self.pad)
    }

    pub fn apply_pure<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::tensor::conv2d(
            x,
            store.value(self.kernels),
            self.bias.map(|b| store.value(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Builds a parameter name like `prefix.part`.
pub fn scoped(prefix: &str, part: &str) -> String {
    format!("{prefix}.{part}")
}
