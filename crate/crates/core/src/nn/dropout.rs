use ndarray::{Array, Dimension};
use rand::Rng;

use super::{Ctx, Scalar};

/// Inverted dropout: kept units are scaled by `1/(1-p)` during training so
/// inference is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0,1)");
        Dropout { p }
    }

    /// Returns the output and the multiplicative mask (`None` when inactive).
    pub fn forward<T: Scalar, D: Dimension>(
        &self,
        ctx: &mut Ctx<T>,
        x: Array<T, D>,
    ) -> (Array<T, D>, Option<Array<T, D>>) {
        if !ctx.is_training() || self.p == 0.0 {
            return (x, None);
        }
        let keep = 1.0 - self.p;
        let scale = T::lit(1.0 / keep);
        let mask = x.mapv(|_| {
            if ctx.rng.gen::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        (x * &mask, Some(mask))
    }

    pub fn backward<T: Scalar, D: Dimension>(
        &self,
        mask: Option<&Array<T, D>>,
        grad: Array<T, D>,
    ) -> Array<T, D> {
        match mask {
            Some(m) => grad * m,
            None => grad,
        }
    }
}
