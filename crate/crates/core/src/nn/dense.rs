use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{Activation, ParamId, ParameterStore, Scalar};
use crate::error::{Error, Result};

/// Fully connected layer applied row-wise: `y = act(x W^T + b)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

pub struct DenseCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    out: Array2<T>,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "dense dims must be positive");
        let w = store.add_uniform(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng);
        let b = store.add_uniform(format!("{name}.b"), &[out_dim], in_dim, rng);
        Dense {
            w,
            b,
            in_dim,
            out_dim,
            act,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView2<T>,
    ) -> Result<(Array2<T>, DenseCache<T>)> {
        if x.ncols() != self.in_dim {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        let pre = x.dot(&store.value2(self.w).t()) + &store.value1(self.b);
        let out = self.act.forward(&pre);
        Ok((
            out.clone(),
            DenseCache {
                x: x.to_owned(),
                pre,
                out,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &DenseCache<T>,
        grad_out: &Array2<T>,
    ) -> Array2<T> {
        let g = self.act.backward(&cache.pre, &cache.out, grad_out);
        let dw = g.t().dot(&cache.x);
        *store.grad_mut(self.w) += &dw.into_dyn();
        *store.grad_mut(self.b) += &g.sum_axis(Axis(0)).into_dyn();
        g.dot(&store.value2(self.w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use ndarray::{array, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::<f64>::new();
        let d = Dense::new(&mut s, "d", 3, 3, Activation::None, &mut rng);
        s.set_value(d.w, Array2::eye(3).into_dyn());
        s.set_value(d.b, ArrayD::zeros(IxDyn(&[3])));
        let x = array![[1.0, -2.0, 0.5]];
        let (y, _) = d.forward(&s, x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::<f64>::new();
        let d = Dense::new(&mut s, "d", 1, 1, Activation::None, &mut rng);
        s.set_value(d.w, array![[2.0]].into_dyn());
        s.set_value(d.b, array![1.0].into_dyn());
        let (y, _) = d.forward(&s, array![[3.0]].view()).unwrap();
        assert_eq!(y, array![[7.0]]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::<f64>::new();
        let d = Dense::new(&mut s, "d", 4, 2, Activation::Tanh, &mut rng);
        assert!(d.forward(&s, Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParameterStore::<f64>::new();
        let d = Dense::new(&mut s, "d", 8, 5, Activation::Tanh, &mut rng);
        let x = s.add_uniform("x", &[3, 8], 1, &mut rng);
        let coef = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let report = grad_check(&mut s, 1e-5, |s, backward| {
            let xv = s.value2(x).to_owned();
            let (y, cache) = d.forward(s, xv.view())?;
            let loss = (&y * &coef).sum();
            if backward {
                let gx = d.backward(s, &cache, &coef);
                *s.grad_mut(x) += &gx.into_dyn();
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
