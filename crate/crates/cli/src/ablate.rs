//! Ablation protocols: matched toy trainings sweeping the semantic
//! token count or the query-scale set under a shared seed, plus the
//! single-scale degeneration check against a plain linear-attention
//! path.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{Context, Result};
use mtlsi_core::fusion::{FusionBlock, FusionConfig};
use mtlsi_core::optim::{AdamW, AdamWConfig};
use mtlsi_core::pipeline::model::Model;
use mtlsi_core::pipeline::train::{train, TrainConfig};
use mtlsi_core::pipeline::ModelConfig;
use mtlsi_core::rng::SeedRng;
use mtlsi_core::{ParamStore, Phase, Tape, Tensor, Var};

use crate::config::TrainSettings;
use crate::container::ContainerReal;
use crate::traincmd::{build_dataset, final_task_losses};
use crate::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Tokens,
    Scales,
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tokens" => Ok(Axis::Tokens),
            "scales" => Ok(Axis::Scales),
            other => Err(format!("unknown axis `{other}` (tokens or scales)")),
        }
    }
}

pub const TOKEN_SWEEP: [usize; 3] = [8, 16, 32];
pub const SCALE_SWEEP: [&[usize]; 4] = [&[1], &[3], &[5], &[1, 3, 5]];

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub axis: Axis,
    pub steps: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,
}

pub struct AblateRow {
    pub setting: String,
    /// (coarse, refined) per task, order matching the config task list.
    pub task_losses: Vec<(f64, f64)>,
    pub total: f64,
}

pub struct AblateOutcome {
    pub rows: Vec<AblateRow>,
    pub csv_path: PathBuf,
    /// Relative error of the scales={1} degeneration check, when run.
    pub degeneration_rel: Option<f64>,
}

fn run_setting<T: ContainerReal>(cfg: &ModelConfig, settings: &TrainSettings) -> Result<AblateRow> {
    let mut rng = SeedRng::new(cfg.seed);
    let mut store = ParamStore::<T>::new();
    let model =
        Model::new(cfg.clone(), &mut store, &mut rng).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut opt_cfg = AdamWConfig::new(settings.lr, settings.steps);
    opt_cfg.weight_decay = settings.weight_decay;
    let mut opt = AdamW::new(opt_cfg, &store);
    let dataset = build_dataset::<T>(cfg, settings);
    let rows = train(
        &model,
        &mut store,
        &mut opt,
        &dataset,
        &TrainConfig {
            steps: settings.steps,
            batch_size: settings.batch_size,
        },
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let task_losses = final_task_losses(&model, &mut store, &dataset)?;
    Ok(AblateRow {
        setting: String::new(),
        task_losses,
        total: rows.last().map(|r| r.total).unwrap_or(f64::NAN),
    })
}

/// Weight-matched equality of the single-scale block against the plain
/// linear-attention composition; returns the relative error.
pub fn degeneration_check(seed: u64) -> Result<f64> {
    let mut rng = SeedRng::new(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = FusionConfig {
        tasks: 3,
        h: 8,
        w: 8,
        d: 16,
        scales: vec![1],
        heads: 4,
    };
    let block = FusionBlock::new(cfg, &mut store, "fusion", &mut rng)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let features: Vec<Tensor<f64>> = (0..3)
        .map(|_| rng.normal_tensor(&[16, 8, 8], 1.0))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let block_out = block
        .forward(&mut store, &mut tape, &vars, Phase::Train)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let plain = block
        .single_scale_linear_path(&store, &features, Phase::Train)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(tape.value(block_out).rel_linf(&plain))
}

pub fn to_csv(cfg_tasks: &[String], rows: &[AblateRow], degeneration: Option<f64>) -> String {
    let mut s = String::from("setting");
    for t in cfg_tasks {
        let _ = write!(s, ",{t}_coarse,{t}_refined");
    }
    s.push_str(",total\n");
    for r in rows {
        let _ = write!(s, "{}", r.setting);
        for (c, rf) in &r.task_losses {
            let _ = write!(s, ",{c},{rf}");
        }
        let _ = writeln!(s, ",{}", r.total);
    }
    if let Some(rel) = degeneration {
        let verdict = if rel <= 1e-12 { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "# degeneration scales=1 vs plain-linear-attention: max_rel_err={rel:.3e} {verdict}"
        );
    }
    s
}

pub fn run_ablate(args: &AblateArgs) -> Result<AblateOutcome> {
    match args.precision {
        Precision::F32 => run_ablate_typed::<f32>(args),
        Precision::F64 => run_ablate_typed::<f64>(args),
    }
}

fn run_ablate_typed<T: ContainerReal>(args: &AblateArgs) -> Result<AblateOutcome> {
    let mut base = ModelConfig::default();
    base.seed = args.seed;
    let settings = TrainSettings {
        steps: args.steps,
        samples: 8,
        batch_size: 4,
        ..TrainSettings::default()
    };

    let mut rows = Vec::new();
    match args.axis {
        Axis::Tokens => {
            for k in TOKEN_SWEEP {
                let mut cfg = base.clone();
                cfg.tokens = k;
                let mut row = run_setting::<T>(&cfg, &settings)?;
                row.setting = format!("k={k}");
                rows.push(row);
            }
        }
        Axis::Scales => {
            for scales in SCALE_SWEEP {
                let mut cfg = base.clone();
                cfg.scales = scales.to_vec();
                let mut row = run_setting::<T>(&cfg, &settings)?;
                row.setting = format!(
                    "scales={}",
                    scales
                        .iter()
                        .map(|s| s.to_string())
                        .collect::<Vec<_>>()
                        .join("-")
                );
                rows.push(row);
            }
        }
    }

    let degeneration_rel = match args.axis {
        Axis::Scales => Some(degeneration_check(args.seed)?),
        Axis::Tokens => None,
    };

    std::fs::create_dir_all(&args.out).with_context(|| format!("create {}", args.out.display()))?;
    let names: Vec<String> = base.tasks.iter().map(|t| t.name.clone()).collect();
    let csv = to_csv(&names, &rows, degeneration_rel);
    let csv_path = args.out.join(match args.axis {
        Axis::Tokens => "ablate_tokens.csv",
        Axis::Scales => "ablate_scales.csv",
    });
    std::fs::write(&csv_path, csv).with_context(|| format!("write {}", csv_path.display()))?;
    Ok(AblateOutcome {
        rows,
        csv_path,
        degeneration_rel,
    })
}
