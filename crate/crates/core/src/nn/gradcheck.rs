//! Central finite differences against analytic gradients.

use super::ParameterStore;
use crate::error::Result;

/// Denominator floor for the relative error; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    /// Entries re-probed with a smaller step.
    pub refined: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every trainable element of `store`.
///
/// `eval(store, backward)` must return the scalar loss; when `backward` is
/// true it must also accumulate analytic gradients into the store.
/// Evaluations must be deterministic (fixed dropout seeds).
pub fn grad_check<F>(store: &mut ParameterStore<f64>, h: f64, eval: F) -> Result<GradReport>
where
    F: FnMut(&mut ParameterStore<f64>, bool) -> Result<f64>,
{
    check_entries(store, h, 0, |n| (0..n).collect(), eval)
}

/// Like [`grad_check`] but probes at most `per_tensor` evenly spaced
/// elements of each trainable array.
///
/// Whole models contain enough ReLU units that a ±h probe can straddle a
/// kink, which breaks the central difference without any analytic error.
/// An entry whose error exceeds [`REFINE_ABOVE`] is therefore re-probed at
/// h/10 and h/100 and the smallest error is kept. A wrong gradient stays
/// wrong at every step.
pub fn grad_check_sampled<F>(store: &mut ParameterStore<f64>, h: f64, per_tensor: usize, eval: F) -> Result<GradReport>
where
    F: FnMut(&mut ParameterStore<f64>, bool) -> Result<f64>,
{
    check_entries(store, h, 2, |n| sample_indices(n, per_tensor), eval)
}

pub const REFINE_ABOVE: f64 = 1e-5;

/// Up to `k` distinct, evenly spread indices in `0..n`.
pub fn sample_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = (0..k).map(|i| (i * (n - 1)) / (k - 1).max(1)).collect();
    v.dedup();
    v
}

fn check_entries<S, F>(
    store: &mut ParameterStore<f64>,
    h: f64,
    refinements: usize,
    select: S,
    mut eval: F,
) -> Result<GradReport>
where
    S: Fn(usize) -> Vec<usize>,
    F: FnMut(&mut ParameterStore<f64>, bool) -> Result<f64>,
{
    store.zero_grads();
    eval(store, true)?;
    let analytic: Vec<_> = store.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = GradReport {
        checked: 0,
        refined: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        if !store.param(id).trainable {
            continue;
        }
        let n = store.value(id).len();
        for k in select(n) {
            let orig = store.value(id).as_slice_memory_order().expect("contiguous")[k];
            let a = analytic[pi].as_slice_memory_order().expect("contiguous")[k];
            let mut step = h;
            let mut numeric = central(store, id, k, orig, step, &mut eval)?;
            let mut err = relative_error(a, numeric);
            for _ in 0..refinements {
                if err <= REFINE_ABOVE {
                    break;
                }
                step /= 10.0;
                report.refined += 1;
                let n2 = central(store, id, k, orig, step, &mut eval)?;
                let e2 = relative_error(a, n2);
                if e2 < err {
                    (numeric, err) = (n2, e2);
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = format!(
                    "{}[{k}]: analytic {a:.6e} numeric {numeric:.6e}",
                    store.param(id).name
                );
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

fn central<F>(store: &mut ParameterStore<f64>, id: super::ParamId, k: usize, orig: f64, h: f64, eval: &mut F) -> Result<f64>
where
    F: FnMut(&mut ParameterStore<f64>, bool) -> Result<f64>,
{
    set(store, id, k, orig + h);
    let plus = eval(store, false)?;
    set(store, id, k, orig - h);
    let minus = eval(store, false)?;
    set(store, id, k, orig);
    Ok((plus - minus) / (2.0 * h))
}

fn set(store: &mut ParameterStore<f64>, id: super::ParamId, k: usize, v: f64) {
    store
        .value_mut(id)
        .as_slice_memory_order_mut()
        .expect("contiguous")[k] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};
    use ndarray::Array2;
    use rand::SeedableRng;

    #[test]
    fn linear_layer_is_exact_to_roundoff() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::<f64>::new();
        let d = Dense::new(&mut s, "lin", 6, 4, Activation::None, &mut rng);
        let x = Array2::from_shape_fn((2, 6), |(i, j)| (i as f64 - j as f64) * 0.3);
        let coef = Array2::from_shape_fn((2, 4), |(i, j)| 1.0 + (i + j) as f64 * 0.1);
        let r = grad_check(&mut s, 1e-5, |s, backward| {
            let (y, c) = d.forward(s, x.view())?;
            if backward {
                d.backward(s, &c, &coef);
            }
            Ok((&y * &coef).sum())
        })
        .unwrap();
        assert_eq!(r.checked, 28);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut s = ParameterStore::<f64>::new();
        let id = s.add_const("w", &[1], 2.0, true);
        let r = grad_check(&mut s, 1e-5, |s, backward| {
            let w = s.value(id)[[0]];
            if backward {
                // true derivative of w^2 is 2w
                s.grad_mut(id)[[0]] += 3.0 * w;
            }
            Ok(w * w)
        })
        .unwrap();
        assert!(r.max_rel_error > 0.3);
        let r = grad_check_sampled(&mut s, 1e-5, 4, |s, backward| {
            let w = s.value(id)[[0]];
            if backward {
                s.grad_mut(id)[[0]] += 3.0 * w;
            }
            Ok(w * w)
        })
        .unwrap();
        assert_eq!(r.refined, 2);
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn refinement_recovers_a_kink_straddling_probe() {
        let mut s = ParameterStore::<f64>::new();
        // relu(w - 2e-6) at w = 0: the ±1e-5 probe straddles the kink
        let id = s.add_const("w", &[1], 0.0, true);
        let eval = |s: &mut ParameterStore<f64>, backward: bool| {
            let w = s.value(id)[[0]];
            let f = |w: f64| (w - 2e-6).max(0.0) + 0.5 * w;
            if backward {
                s.grad_mut(id)[[0]] += 0.5;
            }
            Ok(f(w))
        };
        assert!(grad_check(&mut s, 1e-5, eval).unwrap().max_rel_error > 0.1);
        let r = grad_check_sampled(&mut s, 1e-5, 1, eval).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.refined, 1);
    }

    #[test]
    fn sampled_indices_are_spread_and_distinct() {
        assert_eq!(sample_indices(3, 6), vec![0, 1, 2]);
        assert_eq!(sample_indices(10, 4), vec![0, 3, 6, 9]);
        assert_eq!(sample_indices(10, 1), vec![0]);
        assert!(sample_indices(0, 4).is_empty());
    }
}
