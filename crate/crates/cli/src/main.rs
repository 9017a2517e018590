use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use mtlsi::ablate::{AblateArgs, Axis};
use mtlsi::traincmd::TrainArgs;
use mtlsi::verify::Fault;
use mtlsi::{resolve_seed, Precision};

#[derive(Parser)]
#[command(
    name = "mtlsi",
    about = "Linear cross-task attention toolkit: verify, bench, train, ablate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full invariant suite (oracle equivalences, grad checks,
    /// round-trips, permutation invariances) in 64-bit.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to one property group (e.g. linear-attn, cwib).
        #[arg(long)]
        only: Option<String>,
        /// Test-only fault injection; the suite must then fail.
        #[arg(long, default_value = "none")]
        fault: Fault,
        #[arg(long, default_value = "f64")]
        precision: Precision,
    },
    /// Time the linear fusion block and the window block against a
    /// softmax-MHSA baseline and fit log-log scaling exponents.
    Bench {
        /// Ascending token counts.
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384])]
        sizes: Vec<usize>,
        /// Timed repeats per cell (first warm run is discarded).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// >1 runs (mechanism, size) cells in parallel; keep 1 for clean
        /// scaling fits.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Train the toy coarse-to-fine model on synthetic scenes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total schedule horizon (polynomial LR reaches zero here).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Restrict the dataset to this many samples.
        #[arg(long)]
        overfit: Option<usize>,
        /// Continue from a checkpoint (its stored config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write intermediate checkpoints every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Matched toy trainings sweeping semantic-token count or scales.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long, default_value_t = 60)]
        steps: usize,
        #[arg(long, default_value = "ablate_out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Verify {
            seed,
            only,
            fault,
            precision,
        } => {
            if precision != Precision::F64 {
                bail!("verify runs its tolerance contracts in f64 only");
            }
            let seed = resolve_seed(seed);
            let results = mtlsi::verify::run_verify(seed, only.as_deref(), fault);
            if results.is_empty() {
                bail!("no properties matched --only filter");
            }
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "{} {} ({})",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                if !r.pass {
                    failed.push(r.name.clone());
                }
            }
            println!(
                "verify: {} passed, {} failed",
                results.len() - failed.len(),
                failed.len()
            );
            if !failed.is_empty() {
                eprintln!("failing properties: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench {
            sizes,
            repeats,
            out,
            threads,
            seed,
            precision,
        } => {
            let seed = resolve_seed(seed);
            let (records, fits) = match precision {
                Precision::F32 => mtlsi::bench::run_bench::<f32>(&sizes, repeats, seed, threads)?,
                Precision::F64 => mtlsi::bench::run_bench::<f64>(&sizes, repeats, seed, threads)?,
            };
            mtlsi::bench::write_csv(&out, &records, &fits)?;
            for (mech, e) in &fits {
                println!("{mech}: fitted exponent {e:.3}");
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train {
            config,
            steps,
            out,
            seed,
            lr,
            overfit,
            resume,
            checkpoint_every,
            precision,
        } => {
            let args = TrainArgs {
                config,
                steps,
                out,
                seed: Some(resolve_seed(seed)),
                lr,
                overfit,
                resume,
                checkpoint_every,
                precision,
            };
            let outcome = mtlsi::traincmd::run_train(&args)?;
            if let (Some(first), Some(last)) = (outcome.rows.first(), outcome.rows.last()) {
                println!(
                    "trained steps {}..={}: total loss {} -> {}",
                    first.step, last.step, first.total, last.total
                );
            }
            println!("wrote {}", outcome.loss_csv.display());
            println!("wrote {}", outcome.checkpoint.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ablate {
            axis,
            steps,
            out,
            seed,
            precision,
        } => {
            let args = AblateArgs {
                axis,
                steps,
                out,
                seed: resolve_seed(seed),
                precision,
            };
            let outcome = mtlsi::ablate::run_ablate(&args)?;
            for row in &outcome.rows {
                println!("{}: total {}", row.setting, row.total);
            }
            if let Some(rel) = outcome.degeneration_rel {
                println!("degeneration check rel_err {rel:.3e}");
                if rel > 1e-12 {
                    bail!("scales=1 block departed from the plain linear-attention path");
                }
            }
            println!("wrote {}", outcome.csv_path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
