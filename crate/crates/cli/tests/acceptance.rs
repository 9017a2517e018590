//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `-- --nocapture` to watch). Timing-sensitive criteria
//! share a lock so wallclock measurements are never contaminated by a
//! parallel test in this binary.

use std::sync::Mutex;
use std::time::Instant;

use mtlsi::ablate::{degeneration_check, run_ablate, AblateArgs, Axis};
use mtlsi::bench::run_bench;
use mtlsi::traincmd::{run_train, TrainArgs};
use mtlsi::verify::{run_verify, Fault, PropertyResult};
use mtlsi::Precision;

static SUITE: Mutex<()> = Mutex::new(());

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SUITE.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: usize, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion} {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn property<'a>(results: &'a [PropertyResult], name: &str) -> &'a PropertyResult {
    results
        .iter()
        .find(|r| r.name == name)
        .unwrap_or_else(|| panic!("missing property {name}"))
}

#[test]
fn criterion_1_oracle_equivalence() {
    let _g = lock();
    let t0 = Instant::now();
    let results = run_verify(42, Some("linear-attn"), Fault::None);
    let f64_leg = property(&results, "linear-attn/oracle-equivalence-f64");
    let f32_leg = property(&results, "linear-attn/oracle-equivalence-f32");
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        1,
        f64_leg.pass && f32_leg.pass && elapsed < 10.0,
        &format!(
            "linear vs naive kernel attention, 100 instances per precision; f64 {}, f32 {}, {elapsed:.2}s (<10s)",
            f64_leg.detail, f32_leg.detail
        ),
    );
}

#[test]
fn criterion_2_block_equivalence() {
    let _g = lock();
    let results = run_verify(42, Some("fusion"), Fault::None);
    let p = property(&results, "fusion/block-oracle-equivalence");
    report(
        2,
        p.pass,
        &format!("fused block vs quadratic recomposition; {}", p.detail),
    );
}

#[test]
fn criterion_3_context_reuse() {
    let _g = lock();
    let results = run_verify(42, Some("fusion"), Fault::None);
    let p = property(&results, "fusion/context-reuse-bitwise");
    report(
        3,
        p.pass,
        &format!("shared global context, S=3; {}", p.detail),
    );
}

#[test]
fn criterion_4_gradient_checks() {
    let _g = lock();
    let t0 = Instant::now();
    let results = run_verify(42, Some("gradcheck"), Fault::None);
    let blocks = ["fusion", "distiller", "cwib", "heads"];
    let mut all = true;
    let mut details = Vec::new();
    for b in blocks {
        let p = property(&results, &format!("gradcheck/{b}"));
        all &= p.pass;
        details.push(format!("{b}: {}", p.detail));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        4,
        all && elapsed < 300.0,
        &format!(
            "central differences <=1e-4, >=200 coords per block; {}; {elapsed:.1}s (<300s)",
            details.join("; ")
        ),
    );
}

#[test]
fn criterion_5_complexity_scaling() {
    let _g = lock();
    let t0 = Instant::now();
    let sizes = [256usize, 1024, 4096, 16384];
    let (records, fits) = run_bench::<f32>(&sizes, 5, 42, 1).expect("bench runs");
    let get = |m: &str| fits.iter().find(|(n, _)| *n == m).unwrap().1;
    let (lin, quad, cwib) = (get("linear"), get("quadratic-baseline"), get("cwib"));
    // 4x the token count: linear-path cost grows <=6x, quadratic >=10x
    let median = |m: &str, n: usize| {
        records
            .iter()
            .find(|r| r.mechanism == m && r.n == n)
            .unwrap()
            .median_s
    };
    let lin_ratio = median("linear", 16384) / median("linear", 4096);
    let quad_ratio = median("quadratic-baseline", 16384) / median("quadratic-baseline", 4096);
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        5,
        lin <= 1.3 && cwib <= 1.3 && quad >= 1.7 && lin_ratio <= 6.0 && quad_ratio >= 10.0
            && elapsed < 600.0,
        &format!(
            "log-log wallclock exponents over N in {{256,1024,4096,16384}}: linear {lin:.3} (<=1.3), cwib {cwib:.3} (<=1.3), softmax baseline {quad:.3} (>=1.7); 4x-token ratios: linear {lin_ratio:.1}x (<=6), quadratic {quad_ratio:.1}x (>=10); {elapsed:.0}s (<600s)"
        ),
    );
}

#[test]
fn criterion_6_distiller_structure() {
    let _g = lock();
    let results = run_verify(42, Some("distiller"), Fault::None);
    let rows = property(&results, "distiller/rows-stochastic");
    let env = property(&results, "distiller/token-envelope");
    report(
        6,
        rows.pass && env.pass,
        &format!("assignment {}; envelope on 100 instances", rows.detail),
    );
}

#[test]
fn criterion_7_cwib_structure() {
    let _g = lock();
    let results = run_verify(42, Some("cwib"), Fault::None);
    let rt = property(&results, "cwib/partition-merge-roundtrip");
    let gw = property(&results, "cwib/single-window-global-equivalence");
    let gw1 = property(&results, "cwib/single-window-global-equivalence-1head");
    let perm = property(&results, "cwib/key-permutation-invariance");
    report(
        7,
        rt.pass && gw.pass && gw1.pass && perm.pass,
        &format!(
            "roundtrip exact; single-window {}; permutation {}",
            gw.detail, perm.detail
        ),
    );
}

#[test]
fn criterion_8_toy_training() {
    let _g = lock();
    let t0 = Instant::now();
    let base = |out: std::path::PathBuf, checkpoint_every: Option<usize>| TrainArgs {
        config: None,
        steps: Some(200),
        out,
        seed: Some(42),
        lr: None,
        overfit: Some(1),
        resume: None,
        checkpoint_every,
        precision: Precision::F32,
    };
    let dir = tempfile::tempdir().unwrap();

    // unbroken run
    let a = run_train(&base(dir.path().join("a"), None)).expect("run a");
    // deterministic replica that also drops a mid-run checkpoint
    let b = run_train(&base(dir.path().join("b"), Some(100))).expect("run b");
    // resumed continuation of the replica
    let c = run_train(&TrainArgs {
        resume: Some(dir.path().join("b").join("checkpoint_step100.mtls")),
        ..base(dir.path().join("c"), None)
    })
    .expect("run c");

    let first = a.rows.first().unwrap();
    let last = a.rows.last().unwrap();
    let halved = last.total <= 0.5 * first.total;
    let refined_wins = last.refined <= last.coarse;

    let csv_a = std::fs::read_to_string(&a.loss_csv).unwrap();
    let csv_b = std::fs::read_to_string(&b.loss_csv).unwrap();
    let deterministic = csv_a == csv_b;

    let resumed_matches = c.rows.as_slice() == &a.rows[100..];
    let ckpt_b = std::fs::read(&b.checkpoint).unwrap();
    let ckpt_c = std::fs::read(&c.checkpoint).unwrap();
    let ckpt_bitwise = ckpt_b == ckpt_c;

    let elapsed = t0.elapsed().as_secs_f64();
    report(
        8,
        halved && refined_wins && deterministic && resumed_matches && ckpt_bitwise && elapsed < 600.0,
        &format!(
            "overfit 1 sample / 200 steps / 32x32: total {:.3} -> {:.3} (>=50% drop: {halved}); refined {:.3} <= coarse {:.3}: {refined_wins}; deterministic: {deterministic}; resume rows bitwise: {resumed_matches}; checkpoints bitwise: {ckpt_bitwise}; {elapsed:.0}s (<600s)",
            first.total, last.total, last.refined, last.coarse
        ),
    );
}

#[test]
fn criterion_9_ablation_protocols() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let tokens = run_ablate(&AblateArgs {
        axis: Axis::Tokens,
        steps: 20,
        out: dir.path().join("tok"),
        seed: 42,
        precision: Precision::F32,
    })
    .expect("tokens axis");
    let scales = run_ablate(&AblateArgs {
        axis: Axis::Scales,
        steps: 20,
        out: dir.path().join("sc"),
        seed: 42,
        precision: Precision::F32,
    })
    .expect("scales axis");

    let tok_csv = std::fs::read_to_string(&tokens.csv_path).unwrap();
    let sc_csv = std::fs::read_to_string(&scales.csv_path).unwrap();
    let header = "setting,seg_coarse,seg_refined,depth_coarse,depth_refined,boundary_coarse,boundary_refined,total";
    let tok_ok = tok_csv.lines().next() == Some(header)
        && tokens.rows.len() == 3
        && ["k=8", "k=16", "k=32"]
            .iter()
            .zip(&tokens.rows)
            .all(|(want, row)| &row.setting == want);
    let sc_ok = sc_csv.lines().next() == Some(header)
        && scales.rows.len() == 4
        && ["scales=1", "scales=3", "scales=5", "scales=1-3-5"]
            .iter()
            .zip(&scales.rows)
            .all(|(want, row)| &row.setting == want);

    // degeneration: scales={1} equals the weight-matched plain path
    let rel = scales.degeneration_rel.expect("scales axis runs the check");
    let rel2 = degeneration_check(42).unwrap();
    let degen_ok = rel <= 1e-12 && rel2 <= 1e-12;

    report(
        9,
        tok_ok && sc_ok && degen_ok,
        &format!(
            "tokens axis: {} rows; scales axis: {} rows; degeneration rel_err {rel:.3e} (<=1e-12)",
            tokens.rows.len(),
            scales.rows.len()
        ),
    );
}
