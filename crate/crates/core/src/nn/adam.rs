use ndarray::Zip;

use super::{ParameterStore, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter, then
/// clears the gradients.
pub fn adam_step<T: Scalar>(store: &mut ParameterStore<T>, lr: f64) {
    let cfg = AdamConfig::default();
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (nb1, nb2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (c1, c2) = (T::lit(c1), T::lit(c2));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    for p in store.params_mut().iter_mut().filter(|p| p.trainable) {
        Zip::from(&mut p.value)
            .and(&mut p.m)
            .and(&mut p.v)
            .and(&p.grad)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + nb1 * g;
                *v = b2 * *v + nb2 * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            });
    }
    store.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = ParameterStore::<f64>::new();
        let id = s.add_const("w", &[3], 1.5, true);
        adam_step(&mut s, 0.1);
        assert!(s.value(id).iter().all(|&w| w == 1.5));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn single_step_on_square() {
        // f(w) = w^2 at w0 = 1: g = 2, m = 0.2, v = 0.004,
        // mhat = 2, vhat = 4, w1 = 1 - 0.1 * 2 / (2 + 1e-8)
        let mut s = ParameterStore::<f64>::new();
        let id = s.add_const("w", &[1], 1.0, true);
        s.grad_mut(id)[[0]] = 2.0;
        adam_step(&mut s, 0.1);
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((s.value(id)[[0]] - expected).abs() < 1e-15);
        assert_eq!(s.grad(id)[[0]], 0.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = sum_i a_i (w_i - c_i)^2
        let a = [1.0, 3.0, 0.5];
        let c = [0.3, -1.2, 2.0];
        let mut s = ParameterStore::<f64>::new();
        let id = s.add_const("w", &[3], 0.0, true);
        let loss = |s: &ParameterStore<f64>| -> f64 {
            (0..3).map(|i| a[i] * (s.value(id)[[i]] - c[i]).powi(2)).sum()
        };
        let mut history = vec![loss(&s)];
        for _ in 0..500 {
            for i in 0..3 {
                let w = s.value(id)[[i]];
                s.grad_mut(id)[[i]] = 2.0 * a[i] * (w - c[i]);
            }
            adam_step(&mut s, 0.01);
            history.push(loss(&s));
        }
        assert!(*history.last().unwrap() < 1e-4, "{:?}", history.last());
        let warmup = 5;
        assert!(history[warmup..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut s = ParameterStore::<f32>::new();
        let id = s.add_const("running", &[2], 1.0, false);
        s.grad_mut(id).fill(5.0);
        adam_step(&mut s, 0.1);
        assert!(s.value(id).iter().all(|&w| w == 1.0));
    }
}
