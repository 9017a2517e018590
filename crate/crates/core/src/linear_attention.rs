//! Kernelized linear attention with the ELU+1 feature map.
//!
//! The whole point of the mechanism: `phi(Q) (phi(K)^T V)` regroups the
//! attention product so the bracketed global context is built once in
//! O(N d^2) and shared by every query, instead of materializing the
//! O(N^2) weight matrix. [`naive_kernel_attend`] keeps the quadratic
//! reading alive purely as an equivalence oracle — it must never sit on
//! the fast path.

use alloc::vec;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Real, Tensor};

/// Denominator floor; `phi` outputs can underflow to zero in f32 for
/// strongly negative activations.
pub const EPS_DIV: f64 = 1e-6;

/// Elementwise ELU(x)+1; strictly positive for all finite inputs.
pub fn phi<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(tensor::elu_plus_one)
}

/// The query-independent part of the attention product.
#[derive(Clone, Debug)]
pub struct GlobalContext<T> {
    /// `phi(K)^T V`, `d x d`.
    pub ctx: Tensor<T>,
    /// Column sums of `phi(K)`, `1 x d`; strictly positive.
    pub norm: Tensor<T>,
}

/// Builds the shared context from keys and values of matching length.
pub fn build_context<T: Real>(k: &Tensor<T>, v: &Tensor<T>) -> Result<GlobalContext<T>> {
    if k.rank() != 2 || v.rank() != 2 || k.rows() != v.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "build_context",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let pk = phi(k);
    let ctx = tensor::matmul(&tensor::transpose2(&pk)?, v)?;
    let norm = tensor::col_sums(&pk)?;
    Ok(GlobalContext { ctx, norm })
}

/// `out_i = (phi(q)_i ctx) / (phi(q)_i . norm + eps)`.
pub fn linear_attend<T: Real>(q: &Tensor<T>, gc: &GlobalContext<T>) -> Result<Tensor<T>> {
    if q.rank() != 2 || q.cols() != gc.ctx.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "linear_attend",
            lhs: q.shape().to_vec(),
            rhs: gc.ctx.shape().to_vec(),
        });
    }
    let eps = T::val(EPS_DIV);
    let pq = phi(q);
    let num = tensor::matmul(&pq, &gc.ctx)?;
    let (m, d) = (num.rows(), num.cols());
    let mut out = vec![T::zero(); m * d];
    for i in 0..m {
        let mut den = T::zero();
        for j in 0..d {
            den = den + pq.data()[i * d + j] * gc.norm.data()[j];
        }
        let inv = T::one() / (den + eps);
        for j in 0..d {
            out[i * d + j] = num.data()[i * d + j] * inv;
        }
    }
    Tensor::from_vec(&[m, d], out)
}

/// Quadratic reference: materializes the full `N_q x N` weight matrix
/// `phi(q) phi(k)^T`, row-normalizes it (with the same eps floor) and
/// applies it to `v`. O(N_q * N * d); the oracle for [`linear_attend`].
pub fn naive_kernel_attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    if q.rank() != 2
        || k.rank() != 2
        || v.rank() != 2
        || k.rows() != v.rows()
        || q.cols() != k.cols()
    {
        return Err(CoreError::ShapeMismatch {
            op: "naive_kernel_attend",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let eps = T::val(EPS_DIV);
    let pq = phi(q);
    let pk = phi(k);
    let weights = tensor::matmul(&pq, &tensor::transpose2(&pk)?)?;
    let (m, n) = (weights.rows(), weights.cols());
    let dv = v.cols();
    let mut out = vec![T::zero(); m * dv];
    for i in 0..m {
        let mut den = T::zero();
        for j in 0..n {
            den = den + weights.data()[i * n + j];
        }
        let inv = T::one() / (den + eps);
        for j in 0..n {
            let w = weights.data()[i * n + j] * inv;
            for c in 0..dv {
                out[i * dv + c] = out[i * dv + c] + w * v.data()[j * dv + c];
            }
        }
    }
    Tensor::from_vec(&[m, dv], out)
}

/// Tape-side handles to the shared context of one head.
#[derive(Clone, Copy, Debug)]
pub struct ContextVars {
    pub ctx: Var,
    pub norm_t: Var, // d x 1 column
}

/// Records `phi(k)^T v` and the transposed normalizer on the tape so
/// gradients flow into the key/value projections.
pub fn context_on_tape<T: Real>(tape: &mut Tape<T>, k: Var, v: Var) -> Result<ContextVars> {
    let pk = tape.phi(k);
    let pkt = tape.transpose2(pk)?;
    let ctx = tape.matmul(pkt, v)?;
    let norm = tape.col_sums(pk)?;
    let norm_t = tape.transpose2(norm)?;
    Ok(ContextVars { ctx, norm_t })
}

/// Tape-side linear attention against a prebuilt context.
pub fn attend_on_tape<T: Real>(tape: &mut Tape<T>, q: Var, ctx: &ContextVars) -> Result<Var> {
    let pq = tape.phi(q);
    let num = tape.matmul(pq, ctx.ctx)?;
    let den = tape.matmul(pq, ctx.norm_t)?;
    tape.div_by_col_eps(num, den, T::val(EPS_DIV))
}

/// Estimated multiply-accumulates of the linear path for `n` tokens of
/// width `d`: context build (2 n d^2... kept exact in the two terms) plus
/// per-query products.
pub fn linear_attention_macs(n: usize, d: usize) -> u64 {
    let n = n as u64;
    let d = d as u64;
    // phi(K)^T V and per-query numerator/denominator
    n * d * d + n * d * d + n * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use proptest::prelude::*;

    #[test]
    fn phi_is_strictly_positive() {
        let x = Tensor::from_vec(&[1, 4], vec![0.0f64, 1.0, -20.0, -300.0]).unwrap();
        let y = phi(&x);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 2.0);
        assert!(y.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn context_single_token_with_unit_features() {
        // phi(k) = all ones when k = 0
        let k = Tensor::<f64>::zeros(&[1, 3]);
        let v = Tensor::from_vec(&[1, 3], vec![2.0, -1.0, 0.5]).unwrap();
        let gc = build_context(&k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(gc.ctx.row(r), v.row(0));
        }
        assert!(gc.norm.data().iter().all(|&n| n == 1.0));
    }

    #[test]
    fn context_zero_values() {
        let mut rng = SeedRng::new(12);
        let k = rng.normal_tensor::<f64>(&[5, 4], 1.0);
        let v = Tensor::<f64>::zeros(&[5, 4]);
        let gc = build_context(&k, &v).unwrap();
        assert!(gc.ctx.data().iter().all(|&c| c == 0.0));
        assert!(gc.norm.data().iter().all(|&n| n > 0.0));
    }

    #[test]
    fn context_matches_double_loop_accumulation() {
        let mut rng = SeedRng::new(8);
        let k = rng.normal_tensor::<f64>(&[16, 8], 1.0);
        let v = rng.normal_tensor::<f64>(&[16, 8], 1.0);
        let gc = build_context(&k, &v).unwrap();
        let pk = phi(&k);
        for a in 0..8 {
            for b in 0..8 {
                let mut acc = 0.0;
                for t in 0..16 {
                    acc += pk.data()[t * 8 + a] * v.data()[t * 8 + b];
                }
                assert!((gc.ctx.data()[a * 8 + b] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_kv_token_returns_value_for_any_query() {
        let mut rng = SeedRng::new(13);
        let k = rng.normal_tensor::<f64>(&[1, 6], 1.0);
        let v = rng.normal_tensor::<f64>(&[1, 6], 1.0);
        let q = rng.normal_tensor::<f64>(&[4, 6], 1.0);
        let out = linear_attend(&q, &build_context(&k, &v).unwrap()).unwrap();
        for i in 0..4 {
            for c in 0..6 {
                assert!((out.data()[i * 6 + c] - v.data()[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut rng = SeedRng::new(14);
        let key = rng.normal_tensor::<f64>(&[1, 4], 1.0);
        let k = Tensor::from_vec(&[3, 4], [key.data(), key.data(), key.data()].concat()).unwrap();
        let v = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let q = rng.normal_tensor::<f64>(&[2, 4], 1.0);
        let out = linear_attend(&q, &build_context(&k, &v).unwrap()).unwrap();
        for i in 0..2 {
            for c in 0..4 {
                let mean = (v.data()[c] + v.data()[4 + c] + v.data()[8 + c]) / 3.0;
                assert!((out.data()[i * 4 + c] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_equals_naive_at_tight_tolerance() {
        let mut rng = SeedRng::new(9);
        let q = rng.normal_tensor::<f64>(&[32, 8], 1.0);
        let k = rng.normal_tensor::<f64>(&[32, 8], 1.0);
        let v = rng.normal_tensor::<f64>(&[32, 8], 1.0);
        let fast = linear_attend(&q, &build_context(&k, &v).unwrap()).unwrap();
        let slow = naive_kernel_attend(&q, &k, &v).unwrap();
        assert!(fast.rel_linf(&slow) <= 1e-10);
    }

    #[test]
    fn context_is_query_independent_bitwise() {
        let mut rng = SeedRng::new(15);
        let k = rng.normal_tensor::<f64>(&[10, 5], 1.0);
        let v = rng.normal_tensor::<f64>(&[10, 5], 1.0);
        let gc1 = build_context(&k, &v).unwrap();
        // consume gc1 with some queries, then rebuild
        let q = rng.normal_tensor::<f64>(&[7, 5], 1.0);
        let _ = linear_attend(&q, &gc1).unwrap();
        let gc2 = build_context(&k, &v).unwrap();
        assert!(gc1.ctx.bitwise_eq(&gc2.ctx) && gc1.norm.bitwise_eq(&gc2.norm));
    }

    #[test]
    fn tape_path_matches_pure_path() {
        let mut rng = SeedRng::new(16);
        let q = rng.normal_tensor::<f64>(&[6, 4], 1.0);
        let k = rng.normal_tensor::<f64>(&[9, 4], 1.0);
        let v = rng.normal_tensor::<f64>(&[9, 4], 1.0);
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        let vv = tape.constant(v.clone());
        let ctx = context_on_tape(&mut tape, kv, vv).unwrap();
        let out = attend_on_tape(&mut tape, qv, &ctx).unwrap();
        let pure = linear_attend(&q, &build_context(&k, &v).unwrap()).unwrap();
        assert!(tape.value(out).bitwise_eq(&pure));
    }

    proptest! {
        #[test]
        fn oracle_equivalence_f64(n in 1usize..24, d in 1usize..12, seed in 0u64..300) {
            let mut rng = SeedRng::new(seed);
            let q = rng.normal_tensor::<f64>(&[n, d], 1.0);
            let k = rng.normal_tensor::<f64>(&[n, d], 1.0);
            let v = rng.normal_tensor::<f64>(&[n, d], 1.0);
            let fast = linear_attend(&q, &build_context(&k, &v).unwrap()).unwrap();
            let slow = naive_kernel_attend(&q, &k, &v).unwrap();
            prop_assert!(fast.rel_linf(&slow) <= 1e-10);
        }

        #[test]
        fn outputs_stay_inside_value_envelope(n in 1usize..16, d in 1usize..8, seed in 0u64..300) {
            let mut rng = SeedRng::new(seed.wrapping_add(1000));
            let q = rng.normal_tensor::<f64>(&[n, d], 1.0);
            let k = rng.normal_tensor::<f64>(&[n, d], 1.0);
            let v = rng.normal_tensor::<f64>(&[n, d], 1.0);
            let gc = build_context(&k, &v).unwrap();
            let out = linear_attend(&q, &gc).unwrap();
            // The eps denominator floor scales each convex combination by
            // s/(s+eps) < 1, so the envelope holds up to that shrinkage.
            let pq = phi(&q);
            for i in 0..out.rows() {
                let mut s = 0.0;
                for j in 0..d {
                    s += pq.data()[i * d + j] * gc.norm.data()[j];
                }
                let shrink = EPS_DIV / (s + EPS_DIV);
                for c in 0..d {
                    let lo = (0..n).map(|j| v.data()[j * d + c]).fold(f64::INFINITY, f64::min);
                    let hi = (0..n).map(|j| v.data()[j * d + c]).fold(f64::NEG_INFINITY, f64::max);
                    let slack = lo.abs().max(hi.abs()) * shrink + 1e-12;
                    let o = out.data()[i * d + c];
                    prop_assert!(o >= lo - slack && o <= hi + slack, "{o} outside [{lo}, {hi}]");
                }
            }
        }
    }
}
