//! Wallclock scaling harness: the linear fusion block and the window
//! block against a standard softmax-MHSA baseline over the same token
//! widths. Single-threaded by default so log-log fits measure
//! algorithmic cost; `--threads` opts into running cells in parallel.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mtlsi_core::cwib::{cwib_macs, Cwib, CwibConfig, WindowGrid};
use mtlsi_core::fusion::{fusion_macs, FusionBlock, FusionConfig};
use mtlsi_core::mhsa::{mhsa_forward, mhsa_macs, MhsaWeights};
use mtlsi_core::rng::SeedRng;
use mtlsi_core::{ParamStore, Phase, Real, Tape, Tensor, Var};

/// Feature width shared by every benchmarked mechanism.
pub const BENCH_D: usize = 16;
pub const BENCH_HEADS: usize = 4;
pub const BENCH_TASKS: usize = 2;
pub const BENCH_WINDOW: usize = 8;
pub const BENCH_TOKENS_K: usize = 16;

pub const CSV_HEADER: &str = "mechanism,N,d,repeats,median_s,macs";

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub mechanism: &'static str,
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    pub median_s: f64,
    pub macs: u64,
}

/// Least-squares slope of ln(t) against ln(n).
pub fn fit_exponent(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = (x as f64).ln();
        let ly = y.max(1e-12).ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

/// Times one closure: first run discarded as warmup, median of the rest.
fn time_runs(repeats: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f();
        times.push(t0.elapsed().as_secs_f64());
    }
    median(times)
}

/// Task-feature extents giving exactly `n` fused tokens for two tasks:
/// `n = T * h * w / 4` with `w = 2h`.
pub fn fusion_extent_for_tokens(n: usize) -> Result<(usize, usize)> {
    let hw = 2 * n; // per-task pixel count
    let mut h = (hw as f64 / 2.0).sqrt().round() as usize;
    h -= h % 2;
    while h >= 2 {
        if hw % h == 0 {
            let w = hw / h;
            if w % 2 == 0 {
                return Ok((h, w));
            }
        }
        h -= 2;
    }
    bail!("no even h x w grid yields {n} fused tokens for {BENCH_TASKS} tasks");
}

/// Square map extent with exactly `n = h * w` positions.
pub fn cwib_extent_for_tokens(n: usize) -> Result<(usize, usize)> {
    let mut h = (n as f64).sqrt().round() as usize;
    while h >= 1 {
        if n % h == 0 {
            return Ok((h, n / h));
        }
        h -= 1;
    }
    bail!("no h x w grid yields {n} positions");
}

fn bench_fusion<T: Real>(n: usize, repeats: usize, seed: u64) -> Result<BenchRecord> {
    let (h, w) = fusion_extent_for_tokens(n)?;
    let mut rng = SeedRng::new(seed);
    let mut store = ParamStore::<T>::new();
    let cfg = FusionConfig {
        tasks: BENCH_TASKS,
        h,
        w,
        d: BENCH_D,
        scales: vec![1, 3, 5],
        heads: BENCH_HEADS,
    };
    let macs = fusion_macs(&cfg);
    let block = FusionBlock::new(cfg, &mut store, "fusion", &mut rng)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let features: Vec<Tensor<T>> = (0..BENCH_TASKS)
        .map(|_| rng.normal_tensor(&[BENCH_D, h, w], 1.0))
        .collect();
    let median_s = time_runs(repeats, || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let out = block
            .forward(&mut store, &mut tape, &vars, Phase::Eval)
            .expect("bench forward");
        std::hint::black_box(tape.value(out).data().len());
    });
    Ok(BenchRecord {
        mechanism: "linear",
        n,
        d: BENCH_D,
        repeats,
        median_s,
        macs,
    })
}

fn bench_quadratic<T: Real>(n: usize, repeats: usize, seed: u64) -> Result<BenchRecord> {
    let mut rng = SeedRng::new(seed);
    let w = MhsaWeights::<T>::random(BENCH_D, &mut rng);
    let x = rng.normal_tensor::<T>(&[n, BENCH_D], 1.0);
    let median_s = time_runs(repeats, || {
        let out = mhsa_forward(&x, &w, BENCH_HEADS).expect("bench mhsa");
        std::hint::black_box(out.data().len());
    });
    Ok(BenchRecord {
        mechanism: "quadratic-baseline",
        n,
        d: BENCH_D,
        repeats,
        median_s,
        macs: mhsa_macs(n, BENCH_D),
    })
}

fn bench_cwib<T: Real>(n: usize, repeats: usize, seed: u64) -> Result<BenchRecord> {
    let (h, w) = cwib_extent_for_tokens(n)?;
    let mut rng = SeedRng::new(seed);
    let mut store = ParamStore::<T>::new();
    let cwib = Cwib::new(
        CwibConfig {
            d: BENCH_D,
            tokens: BENCH_TOKENS_K,
            win_h: BENCH_WINDOW.min(h),
            win_w: BENCH_WINDOW.min(w),
            heads: BENCH_HEADS,
        },
        &mut store,
        "cwib",
        &mut rng,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let grid = WindowGrid::new(h, w, BENCH_WINDOW.min(h), BENCH_WINDOW.min(w))
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let p = rng.normal_tensor::<T>(&[n, BENCH_D], 1.0);
    let tokens = rng.normal_tensor::<T>(&[BENCH_TOKENS_K, BENCH_D], 1.0);
    let wa = grid.window_area();
    let median_s = time_runs(repeats, || {
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let tv = tape.constant(tokens.clone());
        let out = cwib
            .forward(&store, &mut tape, pv, tv, &grid)
            .expect("bench cwib");
        std::hint::black_box(tape.value(out).data().len());
    });
    Ok(BenchRecord {
        mechanism: "cwib",
        n,
        d: BENCH_D,
        repeats,
        median_s,
        macs: cwib_macs(n, BENCH_D, wa, BENCH_TOKENS_K),
    })
}

/// Runs every (mechanism, size) cell and returns records in input order
/// plus the fitted exponent per mechanism.
pub fn run_bench<T: Real>(
    sizes: &[usize],
    repeats: usize,
    seed: u64,
    threads: usize,
) -> Result<(Vec<BenchRecord>, Vec<(&'static str, f64)>)> {
    if sizes.len() < 2 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        bail!("at least two ascending sizes required for a scaling fit");
    }
    if repeats < 5 {
        bail!("at least 5 repeats required (median over warm runs)");
    }
    let cells: Vec<(usize, usize)> = (0..3)
        .flat_map(|m| sizes.iter().map(move |&n| (m, n)))
        .collect();
    let run_cell = |&(m, n): &(usize, usize)| -> Result<BenchRecord> {
        match m {
            0 => bench_fusion::<T>(n, repeats, seed),
            1 => bench_quadratic::<T>(n, repeats, seed + 1),
            _ => bench_cwib::<T>(n, repeats, seed + 2),
        }
    };
    let records: Vec<BenchRecord> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .context("build thread pool")?;
        pool.install(|| {
            use rayon::prelude::*;
            cells.par_iter().map(run_cell).collect::<Result<Vec<_>>>()
        })?
    } else {
        cells.iter().map(run_cell).collect::<Result<Vec<_>>>()?
    };

    let mut fits = Vec::new();
    for mech in ["linear", "quadratic-baseline", "cwib"] {
        let pts: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.mechanism == mech)
            .map(|r| (r.n, r.median_s))
            .collect();
        fits.push((
            match mech {
                "linear" => "linear",
                "quadratic-baseline" => "quadratic-baseline",
                _ => "cwib",
            },
            fit_exponent(&pts),
        ));
    }
    Ok((records, fits))
}

/// CSV with the exact header contract plus a trailing fit comment line.
pub fn to_csv(records: &[BenchRecord], fits: &[(&'static str, f64)]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.mechanism, r.n, r.d, r.repeats, r.median_s, r.macs
        );
    }
    let fit_str: Vec<String> = fits.iter().map(|(m, e)| format!("{m}={e:.3}")).collect();
    let _ = writeln!(s, "# fit_exponent {}", fit_str.join(" "));
    s
}

pub fn write_csv(path: &Path, records: &[BenchRecord], fits: &[(&'static str, f64)]) -> Result<()> {
    std::fs::write(path, to_csv(records, fits)).with_context(|| format!("write {}", path.display()))
}
