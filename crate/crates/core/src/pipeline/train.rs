//! Mini-batch training loop with per-step loss tracing.
//!
//! Batch membership is a pure function of the step index, so a run
//! resumed from a checkpoint continues the exact sample sequence of an
//! unbroken run.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::optim::AdamW;
use crate::param::ParamStore;
use crate::pipeline::data::Sample;
use crate::pipeline::model::Model;
use crate::tensor::Real;
use crate::Phase;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Batch-mean weighted coarse-head loss.
    pub coarse: f64,
    /// Batch-mean weighted refined-head loss.
    pub refined: f64,
    pub total: f64,
}

/// Runs steps `opt.step_count()..tc.steps`, appending one trace row per
/// step. Aborts with the step index if the loss goes non-finite.
pub fn train<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    dataset: &[Sample<T>],
    tc: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    if dataset.is_empty() || tc.batch_size == 0 || tc.steps == 0 {
        return Err(crate::error::invalid(
            "train",
            "dataset, steps and batch size must be non-empty",
        ));
    }
    let mut trace = Vec::new();
    let scale = T::val(1.0 / tc.batch_size as f64);
    for step in opt.step_count()..tc.steps {
        store.zero_grads();
        let (mut coarse, mut refined, mut total) = (0.0, 0.0, 0.0);
        for b in 0..tc.batch_size {
            let idx = (step * tc.batch_size + b) % dataset.len();
            let (c, r, t) = model
                .backward_sample(store, &dataset[idx], Phase::Train, scale)
                .map_err(|e| match e {
                    CoreError::NonFinite { .. } => CoreError::Diverged { step },
                    other => other,
                })?;
            coarse += c;
            refined += r;
            total += t;
        }
        let inv = 1.0 / tc.batch_size as f64;
        let row = TraceRow {
            step,
            coarse: coarse * inv,
            refined: refined * inv,
            total: total * inv,
        };
        if !row.total.is_finite() {
            return Err(CoreError::Diverged { step });
        }
        opt.step(store)?;
        trace.push(row);
    }
    Ok(trace)
}
