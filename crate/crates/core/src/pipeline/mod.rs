//! Desk-scale coarse-to-fine multi-task pipeline: a toy backbone feeds
//! per-task preliminary decoders whose features and coarse predictions
//! are fused across tasks, distilled into semantic tokens and injected
//! back into each task's decoder through the window block.

pub mod data;
pub mod model;
pub mod train;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    L1,
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub name: String,
    pub channels: usize,
    pub loss: LossKind,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub tasks: Vec<TaskSpec>,
    pub image_h: usize,
    pub image_w: usize,
    /// Unified interaction width d.
    pub d: usize,
    pub scales: Vec<usize>,
    /// Semantic token count K.
    pub tokens: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub heads: usize,
    pub backbone_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Interaction extent: the stride-4 backbone level.
    pub fn h(&self) -> usize {
        self.image_h / 4
    }

    pub fn w(&self) -> usize {
        self.image_w / 4
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Fused sequence length `T * h * w / 4`.
    pub fn seq_len(&self) -> usize {
        self.task_count() * self.h() * self.w() / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(invalid("config", "at least one task"));
        }
        for t in &self.tasks {
            if t.weight <= 0.0 {
                return Err(invalid("config", "loss weights must be positive"));
            }
            if t.channels == 0 || (t.loss == LossKind::CrossEntropy && t.channels < 2) {
                return Err(invalid("config", "bad channel count"));
            }
            // names select which generated target a head trains on
            if !matches!(t.name.as_str(), "seg" | "depth" | "boundary" | "normal") {
                return Err(invalid(
                    "config",
                    "task names must be one of seg, depth, boundary, normal",
                ));
            }
            if t.name == "normal" && (t.loss != LossKind::L1 || t.channels != 3) {
                return Err(invalid(
                    "config",
                    "normal task needs l1 loss and 3 channels",
                ));
            }
        }
        if self.image_h % 8 != 0 || self.image_w % 8 != 0 {
            return Err(invalid(
                "config",
                "image extent must be a multiple of 8 (two stride-2 stages plus even h, w)",
            ));
        }
        if self.h() % 2 != 0 || self.w() % 2 != 0 {
            return Err(invalid("config", "interaction extent must be even"));
        }
        if self.tokens >= self.seq_len() {
            return Err(invalid(
                "config",
                "semantic token count must stay below the fused sequence length",
            ));
        }
        if self.tokens == 0 {
            return Err(invalid("config", "semantic token count must be positive"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(invalid("config", "heads must divide d"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !matches!(s, 1 | 3 | 5)) {
            return Err(invalid(
                "config",
                "scales must be a nonempty subset of {1,3,5}",
            ));
        }
        if self.win_h == 0 || self.win_w == 0 {
            return Err(invalid("config", "window extents must be positive"));
        }
        if self.backbone_width == 0 {
            return Err(invalid("config", "backbone width must be positive"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tasks: vec![
                TaskSpec {
                    name: String::from("seg"),
                    channels: 4,
                    loss: LossKind::CrossEntropy,
                    weight: 1.0,
                },
                TaskSpec {
                    name: String::from("depth"),
                    channels: 1,
                    loss: LossKind::L1,
                    weight: 1.0,
                },
                TaskSpec {
                    name: String::from("boundary"),
                    channels: 2,
                    loss: LossKind::CrossEntropy,
                    weight: 1.0,
                },
            ],
            image_h: 32,
            image_w: 32,
            d: 16,
            scales: vec![1, 3, 5],
            tokens: 16,
            win_h: 4,
            win_w: 4,
            heads: 4,
            backbone_width: 16,
            seed: 42,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn token_budget_is_enforced() {
        let mut cfg = ModelConfig::default();
        // seq_len = 3 * 8 * 8 / 4 = 48
        cfg.tokens = 48;
        assert!(cfg.validate().is_err());
        cfg.tokens = 47;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn odd_interaction_extent_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.image_h = 36; // not a multiple of 8
        assert!(cfg.validate().is_err());
    }
}
