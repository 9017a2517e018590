//! Task-specific semantic token distiller: compresses the fused sequence
//! of N tokens into K representative tokens through a learned
//! row-stochastic soft assignment.
//!
//! The assignment MLP is a pair of kernel-1 1-D convolutions (realized as
//! per-token linears) with batch norm between them, so it is
//! position-agnostic over tokens. The final logit layer starts at zero,
//! which makes the initial assignment exactly uniform.

use alloc::format;

use crate::error::{invalid, Result};
use crate::layers::{BatchNorm, Dense};
use crate::param::ParamStore;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Real, Tensor};
use crate::Phase;

pub struct TokenDistiller {
    /// Semantic token count K; must stay below the sequence length.
    pub k: usize,
    pub d: usize,
    pub fc1: Dense,
    pub bn: BatchNorm,
    pub fc2: Dense,
    pub proj: Dense,
}

impl TokenDistiller {
    pub fn new<T: Real>(
        k: usize,
        d: usize,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(invalid("distiller", "k must be positive"));
        }
        Ok(TokenDistiller {
            k,
            d,
            // no bias: the batch norm that follows absorbs any channel shift
            fc1: Dense::new(store, &format!("{prefix}.fc1"), d, d, false, rng)?,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), d)?,
            // zero start => uniform initial assignment; no bias: a
            // per-token-k bias shifts a whole softmax row uniformly
            fc2: Dense::new_zeroed(store, &format!("{prefix}.fc2"), d, k, false)?,
            proj: Dense::new(store, &format!("{prefix}.proj"), d, d, true, rng)?,
        })
    }

    /// Soft assignment `A (K x N)`; every row is a distribution over the
    /// N input tokens.
    pub fn assign<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        seq: Var,
        phase: Phase,
    ) -> Result<Var> {
        let n = tape.value(seq).rows();
        if n < self.k {
            return Err(invalid(
                "assign",
                format!("sequence length {n} below token count {}", self.k),
            ));
        }
        let h = self.fc1.apply(store, tape, seq)?;
        // batch norm over channels with tokens as the spatial extent
        let ht = tape.transpose2(h)?;
        let chw = tape.reshape(ht, &[self.d, n, 1])?;
        let bn = self.bn.apply(store, tape, chw, phase)?;
        let flat = tape.reshape(bn, &[self.d, n])?;
        let back = tape.transpose2(flat)?;
        let r = tape.relu(back);
        let logits = self.fc2.apply(store, tape, r)?;
        let lt = tape.transpose2(logits)?;
        tape.softmax_rows(lt, None)
    }

    /// Weighted sum of the projected sequence: `A . Proj(seq)`, `K x d`.
    pub fn distill<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        seq: Var,
        assignment: Var,
    ) -> Result<Var> {
        let p = self.proj.apply(store, tape, seq)?;
        tape.matmul(assignment, p)
    }

    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        seq: Var,
        phase: Phase,
    ) -> Result<Var> {
        let a = self.assign(store, tape, seq, phase)?;
        self.distill(store, tape, seq, a)
    }

    /// Pure recomputation of the assignment (oracle for the tape path).
    pub fn assign_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        seq: &Tensor<T>,
        phase: Phase,
    ) -> Result<Tensor<T>> {
        let n = seq.rows();
        if n < self.k {
            return Err(invalid("assign", "sequence shorter than token count"));
        }
        let h = self.fc1.apply_pure(store, seq)?;
        let chw = tensor::transpose2(&h)?.reshaped(&[self.d, n, 1])?;
        let bn = self.bn.apply_pure(store, &chw, phase)?;
        let back = tensor::transpose2(&bn.reshaped(&[self.d, n])?)?;
        let logits = self.fc2.apply_pure(store, &back.map(tensor::relu))?;
        tensor::softmax_rows_masked(&tensor::transpose2(&logits)?, None)
    }

    pub fn distill_pure<T: Real>(
        &self,
        store: &ParamStore<T>,
        seq: &Tensor<T>,
        assignment: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let p = self.proj.apply_pure(store, seq)?;
        tensor::matmul(assignment, &p)
    }
}
