//! Wallclock scaling of the attention primitives themselves: the fast
//! path must grow near-linearly in token count while the quadratic
//! reference grows near-quadratically. Block-level scaling lives in the
//! `mtlsi` bench harness; this pins the op-level claim.

use std::time::Instant;

use mtlsi_core::linear_attention::{build_context, linear_attend, naive_kernel_attend};
use mtlsi_core::rng::SeedRng;

fn fit_exponent(points: &[(usize, f64)]) -> f64 {
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

fn time_median(repeats: usize, mut f: impl FnMut()) -> f64 {
    f(); // warmup
    let mut ts: Vec<f64> = (0..repeats)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts[ts.len() / 2]
}

#[test]
fn linear_attend_is_subquadratic_and_naive_is_not() {
    const D: usize = 16;
    let mut rng = SeedRng::new(5);
    let mut fast_pts = Vec::new();
    let mut slow_pts = Vec::new();
    for n in [256usize, 1024, 4096, 16384] {
        let q = rng.normal_tensor::<f32>(&[n, D], 1.0);
        let k = rng.normal_tensor::<f32>(&[n, D], 1.0);
        let v = rng.normal_tensor::<f32>(&[n, D], 1.0);
        let fast = time_median(3, || {
            let gc = build_context(&k, &v).unwrap();
            std::hint::black_box(linear_attend(&q, &gc).unwrap().len());
        });
        fast_pts.push((n, fast));
        // keep the largest quadratic run bounded
        let reps = if n >= 16384 { 1 } else { 3 };
        let slow = time_median(reps, || {
            std::hint::black_box(naive_kernel_attend(&q, &k, &v).unwrap().len());
        });
        slow_pts.push((n, slow));
    }
    let fast_e = fit_exponent(&fast_pts);
    let slow_e = fit_exponent(&slow_pts);
    assert!(
        fast_e <= 1.3,
        "linear path exponent {fast_e:.3} > 1.3: {fast_pts:?}"
    );
    assert!(
        slow_e >= 1.7,
        "naive path exponent {slow_e:.3} < 1.7: {slow_pts:?}"
    );
}
