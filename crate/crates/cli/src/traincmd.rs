//! The `train` subcommand: builds (or restores) a model, runs the loop,
//! writes the loss trace CSV and checkpoints.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mtlsi_core::optim::{AdamW, AdamWConfig};
use mtlsi_core::pipeline::data::{synth_dataset, DataConfig, Sample};
use mtlsi_core::pipeline::model::Model;
use mtlsi_core::pipeline::train::{train, TraceRow, TrainConfig};
use mtlsi_core::pipeline::ModelConfig;
use mtlsi_core::rng::SeedRng;
use mtlsi_core::{CoreError, ParamStore};

use crate::config::{from_text, to_text, TrainSettings};
use crate::container::{checkpoint_to_container, restore_checkpoint, Container, ContainerReal};
use crate::Precision;

pub const LOSS_CSV_HEADER: &str = "step,coarse_loss,refined_loss,total_loss";

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub steps: Option<usize>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub overfit: Option<usize>,
    pub resume: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    pub precision: Precision,
}

pub struct TrainOutcome {
    pub rows: Vec<TraceRow>,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Dataset stream is derived from the model seed so a config alone pins
/// the whole run.
pub fn dataset_seed(cfg: &ModelConfig) -> u64 {
    cfg.seed ^ 0x4441_5441 // "DATA"
}

pub fn build_dataset<T: ContainerReal>(
    cfg: &ModelConfig,
    settings: &TrainSettings,
) -> Vec<Sample<T>> {
    let mut data_cfg = DataConfig::new(cfg.image_h, cfg.image_w);
    data_cfg.with_normals = cfg.tasks.iter().any(|t| t.name == "normal");
    synth_dataset(dataset_seed(cfg), settings.samples, &data_cfg)
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.coarse, r.refined, r.total);
    }
    s
}

fn resolve_settings(args: &TrainArgs) -> Result<(ModelConfig, TrainSettings)> {
    let (mut cfg, mut settings) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("read config {}", path.display()))?;
            from_text(&text)?
        }
        None => (ModelConfig::default(), TrainSettings::default()),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        settings.steps = steps;
    }
    if let Some(lr) = args.lr {
        settings.lr = lr;
    }
    if let Some(n) = args.overfit {
        if n == 0 {
            bail!("--overfit needs at least one sample");
        }
        settings.samples = n;
        settings.batch_size = settings.batch_size.min(n);
    }
    Ok((cfg, settings))
}

pub fn run_train(args: &TrainArgs) -> Result<TrainOutcome> {
    match args.precision {
        Precision::F32 => run_train_typed::<f32>(args),
        Precision::F64 => run_train_typed::<f64>(args),
    }
}

fn run_train_typed<T: ContainerReal>(args: &TrainArgs) -> Result<TrainOutcome> {
    // a resumed run takes its entire configuration from the checkpoint
    let (cfg, settings, resume_from) = match &args.resume {
        Some(path) => {
            let container = Container::read_file(path)?;
            let (cfg, settings) = from_text(&container.config)?;
            (cfg, settings, Some(container))
        }
        None => {
            let (cfg, settings) = resolve_settings(args)?;
            (cfg, settings, None)
        }
    };

    if settings.steps == 0 {
        bail!("steps must be positive");
    }
    let mut rng = SeedRng::new(cfg.seed);
    let mut store = ParamStore::<T>::new();
    let model =
        Model::new(cfg.clone(), &mut store, &mut rng).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut opt_cfg = AdamWConfig::new(settings.lr, settings.steps);
    opt_cfg.weight_decay = settings.weight_decay;
    let mut opt = AdamW::new(opt_cfg, &store);
    if let Some(container) = &resume_from {
        restore_checkpoint(container, &mut store, &mut opt)?;
    }

    let dataset = build_dataset::<T>(&cfg, &settings);
    std::fs::create_dir_all(&args.out).with_context(|| format!("create {}", args.out.display()))?;

    let config_text = to_text(&cfg, &settings);
    let mut rows = Vec::new();
    let next_stop = |done: usize| -> usize {
        match args.checkpoint_every {
            Some(k) if k > 0 => ((done / k) + 1) * k,
            _ => settings.steps,
        }
        .min(settings.steps)
    };

    while opt.step_count() < settings.steps {
        let stop = next_stop(opt.step_count());
        let segment = train(
            &model,
            &mut store,
            &mut opt,
            &dataset,
            &TrainConfig {
                steps: stop,
                batch_size: settings.batch_size,
            },
        )
        .map_err(|e| match e {
            CoreError::Diverged { step } => anyhow::anyhow!("diverged at step {step}"),
            other => anyhow::anyhow!("{other}"),
        })?;
        rows.extend(segment);
        if opt.step_count() < settings.steps {
            let path = args
                .out
                .join(format!("checkpoint_step{}.mtls", opt.step_count()));
            checkpoint_to_container(config_text.clone(), &store, &opt).write_file(&path)?;
        }
    }

    let checkpoint = args.out.join("checkpoint.mtls");
    checkpoint_to_container(config_text, &store, &opt).write_file(&checkpoint)?;
    let loss_csv = args.out.join("loss.csv");
    std::fs::write(&loss_csv, trace_to_csv(&rows))
        .with_context(|| format!("write {}", loss_csv.display()))?;
    Ok(TrainOutcome {
        rows,
        checkpoint,
        loss_csv,
    })
}

/// Caches a synthetic dataset in the shared tensor-container format.
pub fn dataset_to_container<T: ContainerReal>(
    samples: &[Sample<T>],
    config_text: String,
) -> Container {
    let mut c = Container::new(config_text);
    for (i, s) in samples.iter().enumerate() {
        c.push(format!("sample{i}.image"), T::to_data(&s.image));
        c.push(
            format!("sample{i}.seg"),
            crate::container::TensorData::U32(
                vec![s.targets.seg.len()],
                s.targets.seg.iter().map(|&x| x as u32).collect(),
            ),
        );
        c.push(format!("sample{i}.depth"), T::to_data(&s.targets.depth));
        c.push(
            format!("sample{i}.boundary"),
            crate::container::TensorData::U32(
                vec![s.targets.boundary.len()],
                s.targets.boundary.iter().map(|&x| x as u32).collect(),
            ),
        );
        if let Some(n) = &s.targets.normal {
            c.push(format!("sample{i}.normal"), T::to_data(n));
        }
    }
    c
}

/// Restores a cached dataset; inverse of [`dataset_to_container`].
pub fn dataset_from_container<T: ContainerReal>(c: &Container) -> Result<Vec<Sample<T>>> {
    use crate::container::TensorData;
    use mtlsi_core::pipeline::data::TaskTargets;
    let mut out = Vec::new();
    for i in 0.. {
        let Some(image) = c.find(&format!("sample{i}.image")) else {
            break;
        };
        let image = T::from_data(image).context("image dtype mismatch")?;
        let seg = match c.find(&format!("sample{i}.seg")) {
            Some(TensorData::U32(_, v)) => v.iter().map(|&x| x as usize).collect(),
            _ => bail!("sample {i} missing seg"),
        };
        let depth = c
            .find(&format!("sample{i}.depth"))
            .and_then(T::from_data)
            .with_context(|| format!("sample {i} missing depth"))?;
        let boundary = match c.find(&format!("sample{i}.boundary")) {
            Some(TensorData::U32(_, v)) => v.iter().map(|&x| x as usize).collect(),
            _ => bail!("sample {i} missing boundary"),
        };
        let normal = c.find(&format!("sample{i}.normal")).and_then(T::from_data);
        out.push(Sample {
            image,
            targets: TaskTargets {
                seg,
                depth,
                boundary,
                normal,
            },
        });
    }
    Ok(out)
}

/// Final per-task losses of a trained model over its dataset, reported
/// by the ablation table.
pub fn final_task_losses<T: ContainerReal>(
    model: &Model,
    store: &mut ParamStore<T>,
    dataset: &[Sample<T>],
) -> Result<Vec<(f64, f64)>> {
    use mtlsi_core::{Phase, Tape};
    let tasks = model.cfg.task_count();
    let mut sums = vec![(0.0f64, 0.0f64); tasks];
    for sample in dataset {
        let mut tape = Tape::new();
        let outs = model
            .full_forward(store, &mut tape, &sample.image, Phase::Train)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        for t in 0..tasks {
            let lc = model
                .task_loss_value(&mut tape, outs.coarse[t], t, &sample.targets)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let lr = model
                .task_loss_value(&mut tape, outs.refined[t], t, &sample.targets)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            sums[t].0 += lc;
            sums[t].1 += lr;
        }
    }
    let n = dataset.len() as f64;
    Ok(sums.into_iter().map(|(c, r)| (c / n, r / n)).collect())
}
