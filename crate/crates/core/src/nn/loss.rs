use ndarray::{Array, ArrayView1, Array1, Dimension, Zip};

use super::Scalar;

pub const BCE_CLAMP: f64 = 1e-7;

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse_loss<T: Scalar, D: Dimension>(pred: &Array<T, D>, target: &Array<T, D>) -> (T, Array<T, D>) {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = T::lit(pred.len() as f64);
    let diff = pred - target;
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let grad = diff.mapv(|d| T::lit(2.0) * d / n);
    (loss, grad)
}

/// Masked MSE: only entries with weight 1 count; mean over counted entries.
pub fn masked_mse_loss<T: Scalar, D: Dimension>(
    pred: &Array<T, D>,
    target: &Array<T, D>,
    weight: &Array<T, D>,
) -> (T, Array<T, D>, usize) {
    let count = weight.iter().filter(|&&w| w > T::zero()).count();
    let n = T::lit(count.max(1) as f64);
    let mut grad = pred - target;
    let mut loss = T::zero();
    Zip::from(&mut grad).and(weight).for_each(|g, &w| {
        loss += w * *g * *g;
        *g = T::lit(2.0) * w * *g / n;
    });
    (loss / n, grad, count)
}

/// Mean binary cross-entropy on probabilities clamped to
/// `[1e-7, 1 - 1e-7]`. The gradient is taken at the clamped value.
pub fn bce_loss<T: Scalar>(p: ArrayView1<T>, labels: ArrayView1<T>) -> (T, Array1<T>) {
    assert_eq!(p.len(), labels.len(), "bce length mismatch");
    let n = T::lit(p.len() as f64);
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let mut loss = T::zero();
    let mut grad = Array1::zeros(p.len());
    for ((g, &pi), &y) in grad.iter_mut().zip(p.iter()).zip(labels.iter()) {
        let pc = pi.max(lo).min(hi);
        loss -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        *g = (-y / pc + (T::one() - y) / (T::one() - pc)) / n;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_reference_values() {
        let (l, _) = mse_loss(&array![1.0, 2.0], &array![1.0, 2.0]);
        assert_eq!(l, 0.0);
        let (l, g) = mse_loss(&array![0.0, 2.0], &array![0.0, 0.0]);
        assert_eq!(l, 2.0);
        assert_eq!(g, array![0.0, 2.0]);
    }

    #[test]
    fn bce_reference_values() {
        let (l, _) = bce_loss(array![1.0, 0.0].view(), array![1.0, 0.0].view());
        assert!(l <= 1e-6);
        for y in [0.0, 1.0, 0.3] {
            let (l, _) = bce_loss(array![0.5f64].view(), array![y].view());
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_gradient_matches_differences() {
        let p = array![0.2f64, 0.7, 0.45];
        let y = array![0.0, 1.0, 1.0];
        let (_, g) = bce_loss(p.view(), y.view());
        let h = 1e-7;
        for i in 0..3 {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let num = (bce_loss(pp.view(), y.view()).0 - bce_loss(pm.view(), y.view()).0) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_mse_ignores_padding() {
        let (l, g, n) = masked_mse_loss(&array![1.0, 5.0], &array![0.0, 0.0], &array![1.0, 0.0]);
        assert_eq!(n, 1);
        assert_eq!(l, 1.0);
        assert_eq!(g, array![2.0, 0.0]);
    }
}
