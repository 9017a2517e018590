//! Central-difference gradient verification.
//!
//! The arbiter of backward-pass correctness: analytic gradients (left in
//! `ParamStore::grad` by the caller) are compared against
//! `(f(p+h) - f(p-h)) / 2h` on sampled coordinates. Run in f64; central
//! differences in f32 cannot resolve 1e-4 relative error.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};
use crate::param::ParamStore;
use crate::rng::SeedRng;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Param name and flat element index of the worst coordinate.
    pub worst: (String, usize),
}

/// Relative error used throughout: |a-n| / max(|a|, |n|, 1e-8).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks analytic grads of trainable params against central differences
/// of the scalar loss `f`. At most `max_coords` coordinates are sampled
/// (all of them when the model is small enough). `f` may mutate
/// non-trainable state (BN running stats); such state must not feed back
/// into the loss value.
pub fn grad_check<T: Real>(
    store: &mut ParamStore<T>,
    f: &mut dyn FnMut(&mut ParamStore<T>) -> Result<T>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_filtered(store, f, h, max_coords, seed, None)
}

/// Like [`grad_check`] but samples only params whose name starts with one
/// of the given prefixes, so one backward pass can feed per-block checks.
pub fn grad_check_filtered<T: Real>(
    store: &mut ParamStore<T>,
    f: &mut dyn FnMut(&mut ParamStore<T>) -> Result<T>,
    h: f64,
    max_coords: usize,
    seed: u64,
    name_prefixes: Option<&[&str]>,
) -> Result<GradCheckReport> {
    grad_check_multi_h(store, f, &[h], max_coords, seed, name_prefixes)
}

/// Per-coordinate check against several step sizes, scoring each
/// coordinate by its best agreement. Two measurement artifacts of
/// central differences are step-localized: a kink (relu, |.|) inside the
/// +-h window corrupts large steps, and f64 cancellation on near-zero
/// gradients corrupts small steps (noise scales as 1/h). A genuinely
/// wrong analytic gradient disagrees at every step, so requiring one
/// agreeing step keeps the check sound while removing the lottery over
/// which artifact a sampled coordinate draws.
pub fn grad_check_multi_h<T: Real>(
    store: &mut ParamStore<T>,
    f: &mut dyn FnMut(&mut ParamStore<T>) -> Result<T>,
    hs: &[f64],
    max_coords: usize,
    seed: u64,
    name_prefixes: Option<&[&str]>,
) -> Result<GradCheckReport> {
    if hs.is_empty() {
        return Err(invalid("grad_check", "at least one step size"));
    }
    let keep = |name: &str| name_prefixes.map_or(true, |ps| ps.iter().any(|p| name.starts_with(p)));
    let coords: Vec<(crate::param::ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable && keep(&p.name))
        .flat_map(|(id, p)| (0..p.value.len()).map(move |e| (id, e)))
        .collect();
    if coords.is_empty() {
        return Err(invalid("grad_check", "no trainable coordinates"));
    }

    let sampled: Vec<(crate::param::ParamId, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        let mut rng = SeedRng::new(seed);
        let mut picked = Vec::with_capacity(max_coords);
        let mut taken = alloc::collections::BTreeSet::new();
        while picked.len() < max_coords {
            let i = rng.below(coords.len());
            if taken.insert(i) {
                picked.push(coords[i]);
            }
        }
        picked
    };

    let analytic: Vec<f64> = sampled
        .iter()
        .map(|&(id, e)| store.get(id).grad.data()[e].f64())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: sampled.len(),
        worst: (String::new(), 0),
    };

    for (k, &(id, e)) in sampled.iter().enumerate() {
        let orig = store.get(id).value.data()[e];
        let mut best = f64::INFINITY;
        for &h in hs {
            store.get_mut(id).value.data_mut()[e] = orig + T::val(h);
            let plus = f(store)?;
            store.get_mut(id).value.data_mut()[e] = orig - T::val(h);
            let minus = f(store)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CoreError::NonFinite { op: "grad_check" });
            }
            let numeric = (plus.f64() - minus.f64()) / (2.0 * h);
            best = best.min(rel_err(analytic[k], numeric));
        }
        if best > report.max_rel_err {
            report.max_rel_err = best;
            report.worst = (store.get(id).name.clone(), e);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_loss_matches_to_1e9() {
        // f(theta) = sum theta^2, analytic grad 2*theta
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(9);
        let id = store.add("theta", rng.normal_tensor(&[5], 1.0)).unwrap();
        let grad = store.value(id).scale(2.0);
        store.get_mut(id).grad = grad;
        let report = grad_check(
            &mut store,
            &mut |s: &mut ParamStore<f64>| {
                Ok(s.value(s.lookup("theta").unwrap())
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum())
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-9, "err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 5);
    }

    #[test]
    fn constant_loss_gives_zero_both_sides() {
        let mut store = ParamStore::<f64>::new();
        store.add("theta", Tensor::filled(&[3], 0.7)).unwrap();
        let report = grad_check(&mut store, &mut |_| Ok(1.25f64), 1e-5, 10, 0).unwrap();
        // analytic 0 (zero-initialized grads) vs numeric 0
        assert!(report.max_rel_err <= 1e-12);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::scalar(2.0)).unwrap();
        store.get_mut(id).grad = Tensor::scalar(100.0); // truth is 4.0
        let report = grad_check(
            &mut store,
            &mut |s: &mut ParamStore<f64>| {
                let v = s.value(s.lookup("theta").unwrap()).item();
                Ok(v * v)
            },
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.9);
    }

    #[test]
    fn sampling_respects_budget() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(11);
        let id = store.add("big", rng.normal_tensor(&[40, 40], 1.0)).unwrap();
        let grad = store.value(id).scale(2.0);
        store.get_mut(id).grad = grad;
        let report = grad_check(
            &mut store,
            &mut |s: &mut ParamStore<f64>| {
                Ok(s.value(s.lookup("big").unwrap())
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum())
            },
            1e-5,
            64,
            3,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 64);
        // the summed loss is ~1600 in magnitude, so central differences
        // lose several digits to cancellation here
        assert!(report.max_rel_err <= 1e-4, "err {}", report.max_rel_err);
    }
}
