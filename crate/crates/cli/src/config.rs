//! Flat `key = value` config: one key per line, `#` comments, unknown
//! keys rejected. The canonical writer emits keys in a fixed order so
//! checkpoints and diffs stay stable.

use anyhow::{bail, Context, Result};
use mtlsi_core::pipeline::{LossKind, ModelConfig, TaskSpec};

/// Training settings carried alongside the model config so a resumed run
/// reproduces the original schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total schedule horizon (polynomial LR decays to zero here).
    pub steps: usize,
    /// Synthetic dataset size.
    pub samples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 4,
            steps: 200,
            samples: 16,
        }
    }
}

fn format_tasks(tasks: &[TaskSpec]) -> String {
    tasks
        .iter()
        .map(|t| {
            let loss = match t.loss {
                LossKind::CrossEntropy => "ce",
                LossKind::L1 => "l1",
            };
            format!("{}:{}:{}:{}", t.name, loss, t.channels, t.weight)
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_tasks(value: &str) -> Result<Vec<TaskSpec>> {
    let mut tasks = Vec::new();
    for part in value.split(',') {
        let fields: Vec<&str> = part.trim().split(':').collect();
        if fields.len() != 4 {
            bail!("task spec must be name:loss:channels:weight, got `{part}`");
        }
        let loss = match fields[1] {
            "ce" => LossKind::CrossEntropy,
            "l1" => LossKind::L1,
            other => bail!("unknown loss kind `{other}` (expected ce or l1)"),
        };
        tasks.push(TaskSpec {
            name: fields[0].to_string(),
            channels: fields[2].parse().context("task channels")?,
            loss,
            weight: fields[3].parse().context("task weight")?,
        });
    }
    Ok(tasks)
}

fn format_scales(scales: &[usize]) -> String {
    scales
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical text form; also the config block stored in checkpoints.
pub fn to_text(cfg: &ModelConfig, train: &TrainSettings) -> String {
    let mut s = String::new();
    s.push_str(&format!("tasks = {}\n", format_tasks(&cfg.tasks)));
    s.push_str(&format!("image_h = {}\n", cfg.image_h));
    s.push_str(&format!("image_w = {}\n", cfg.image_w));
    s.push_str(&format!("d = {}\n", cfg.d));
    s.push_str(&format!("scales = {}\n", format_scales(&cfg.scales)));
    s.push_str(&format!("tokens = {}\n", cfg.tokens));
    s.push_str(&format!("win_h = {}\n", cfg.win_h));
    s.push_str(&format!("win_w = {}\n", cfg.win_w));
    s.push_str(&format!("heads = {}\n", cfg.heads));
    s.push_str(&format!("backbone_width = {}\n", cfg.backbone_width));
    s.push_str(&format!("seed = {}\n", cfg.seed));
    s.push_str(&format!("lr = {}\n", train.lr));
    s.push_str(&format!("weight_decay = {}\n", train.weight_decay));
    s.push_str(&format!("batch_size = {}\n", train.batch_size));
    s.push_str(&format!("steps = {}\n", train.steps));
    s.push_str(&format!("samples = {}\n", train.samples));
    s
}

/// Parses config text over the defaults; every present key overrides.
pub fn from_text(text: &str) -> Result<(ModelConfig, TrainSettings)> {
    let mut cfg = ModelConfig::default();
    let mut train = TrainSettings::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "tasks" => cfg.tasks = parse_tasks(value)?,
            "image_h" => cfg.image_h = value.parse().context("image_h")?,
            "image_w" => cfg.image_w = value.parse().context("image_w")?,
            "d" => cfg.d = value.parse().context("d")?,
            "scales" => {
                cfg.scales = value
                    .split(',')
                    .map(|s| s.trim().parse().context("scales"))
                    .collect::<Result<_>>()?;
            }
            "tokens" => cfg.tokens = value.parse().context("tokens")?,
            "win_h" => cfg.win_h = value.parse().context("win_h")?,
            "win_w" => cfg.win_w = value.parse().context("win_w")?,
            "heads" => cfg.heads = value.parse().context("heads")?,
            "backbone_width" => cfg.backbone_width = value.parse().context("backbone_width")?,
            "seed" => cfg.seed = value.parse().context("seed")?,
            "lr" => train.lr = value.parse().context("lr")?,
            "weight_decay" => train.weight_decay = value.parse().context("weight_decay")?,
            "batch_size" => train.batch_size = value.parse().context("batch_size")?,
            "steps" => train.steps = value.parse().context("steps")?,
            "samples" => train.samples = value.parse().context("samples")?,
            other => bail!("line {}: unknown key `{other}`", lineno + 1),
        }
    }
    cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((cfg, train))
}
