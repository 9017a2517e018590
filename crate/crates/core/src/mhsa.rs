//! Standard softmax multi-head attention, used two ways: as the O(N^2)
//! wallclock baseline the linear path is benchmarked against, and as the
//! per-window reference oracle for the window-attention branch. Scores
//! stream row by row so memory stays O(N d) even at large N.

use alloc::vec;
use alloc::vec::Vec;

// float intrinsics in no_std builds; std test builds shadow it
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{invalid, CoreError, Result};
use crate::tensor::{self, Real, Tensor};

/// Softmax attention `softmax(q k^T * scale) v` for one head, streaming
/// one query row at a time. `masked_keys` marks key rows excluded from
/// every query's distribution.
pub fn softmax_attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
    masked_keys: Option<&[bool]>,
) -> Result<Tensor<T>> {
    if q.rank() != 2
        || k.rank() != 2
        || v.rank() != 2
        || q.cols() != k.cols()
        || k.rows() != v.rows()
    {
        return Err(CoreError::ShapeMismatch {
            op: "softmax_attend",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if let Some(mask) = masked_keys {
        if mask.len() != k.rows() || mask.iter().all(|&m| m) {
            return Err(invalid("softmax_attend", "bad key mask"));
        }
    }
    let (nq, d) = (q.rows(), q.cols());
    let (nk, dv) = (k.rows(), v.cols());
    let live = |j: usize| masked_keys.map_or(true, |m| !m[j]);
    let mut out = vec![T::zero(); nq * dv];
    let mut scores = vec![T::zero(); nk];
    for i in 0..nq {
        let qrow = q.row(i);
        let mut max = T::neg_infinity();
        for j in 0..nk {
            if !live(j) {
                continue;
            }
            let krow = k.row(j);
            let mut dot = T::zero();
            for c in 0..d {
                dot = dot + qrow[c] * krow[c];
            }
            let s = dot * scale;
            scores[j] = s;
            max = max.max(s);
        }
        let mut den = T::zero();
        for j in 0..nk {
            if live(j) {
                let e = (scores[j] - max).exp();
                scores[j] = e;
                den = den + e;
            } else {
                scores[j] = T::zero();
            }
        }
        let inv = T::one() / den;
        let orow = &mut out[i * dv..(i + 1) * dv];
        for j in 0..nk {
            let w = scores[j] * inv;
            if w == T::zero() {
                continue;
            }
            let vrow = v.row(j);
            for c in 0..dv {
                orow[c] = orow[c] + w * vrow[c];
            }
        }
    }
    Tensor::from_vec(&[nq, dv], out)
}

/// Projection weights of the baseline block; all `d x d`.
pub struct MhsaWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Real> MhsaWeights<T> {
    pub fn random(d: usize, rng: &mut crate::rng::SeedRng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        MhsaWeights {
            wq: rng.normal_tensor(&[d, d], std),
            wk: rng.normal_tensor(&[d, d], std),
            wv: rng.normal_tensor(&[d, d], std),
            wo: rng.normal_tensor(&[d, d], std),
        }
    }
}

/// Full softmax MHSA block on an `N x d` sequence: QKV projections,
/// per-head scaled-dot-product attention, head concat, output projection.
pub fn mhsa_forward<T: Real>(x: &Tensor<T>, w: &MhsaWeights<T>, heads: usize) -> Result<Tensor<T>> {
    let d = x.cols();
    if heads == 0 || d % heads != 0 {
        return Err(invalid("mhsa", "head count must divide feature width"));
    }
    let dh = d / heads;
    let scale = T::val(1.0 / (dh as f64).sqrt());
    let q = tensor::matmul(x, &w.wq)?;
    let k = tensor::matmul(x, &w.wk)?;
    let v = tensor::matmul(x, &w.wv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = tensor::slice_cols(&q, h * dh, dh)?;
        let ks = tensor::slice_cols(&k, h * dh, dh)?;
        let vs = tensor::slice_cols(&v, h * dh, dh)?;
        head_outs.push(softmax_attend(&qs, &ks, &vs, scale, None)?);
    }
    let refs: Vec<&Tensor<T>> = head_outs.iter().collect();
    let cat = tensor::concat_cols(&refs)?;
    tensor::matmul(&cat, &w.wo)
}

/// Estimated multiply-accumulates of [`mhsa_forward`].
pub fn mhsa_macs(n: usize, d: usize) -> u64 {
    let n = n as u64;
    let d = d as u64;
    4 * n * d * d + 2 * n * n * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = SeedRng::new(30);
        let q = rng.normal_tensor::<f64>(&[5, 3], 1.0);
        let k = rng.normal_tensor::<f64>(&[1, 3], 1.0);
        let v = rng.normal_tensor::<f64>(&[1, 3], 1.0);
        let out = softmax_attend(&q, &k, &v, 1.0, None).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut rng = SeedRng::new(31);
        let q = rng.normal_tensor::<f64>(&[2, 3], 1.0);
        let k = rng.normal_tensor::<f64>(&[4, 3], 1.0);
        let v = rng.normal_tensor::<f64>(&[4, 3], 1.0);
        let mask = vec![false, true, false, true];
        let masked = softmax_attend(&q, &k, &v, 1.0, Some(&mask)).unwrap();
        // equivalent to attending only the unmasked rows
        let k2 = tensor::gather_rows(&k, &[0, 2]).unwrap();
        let v2 = tensor::gather_rows(&v, &[0, 2]).unwrap();
        let dense = softmax_attend(&q, &k2, &v2, 1.0, None).unwrap();
        assert!(masked.rel_linf(&dense) < 1e-12);
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut rng = SeedRng::new(32);
        let x = rng.normal_tensor::<f64>(&[4, 6], 1.0);
        let w = MhsaWeights::random(6, &mut rng);
        assert!(mhsa_forward(&x, &w, 4).is_err());
        assert!(mhsa_forward(&x, &w, 2).is_ok());
    }
}
