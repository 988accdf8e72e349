use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

use super::{Ctx, ParamId, ParameterStore, Scalar};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over the channel axis: columns of an M × C matrix or
/// channel planes of an N × C × H × W array.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub struct BatchNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
    training: bool,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[channels], 1.0, true),
            beta: store.add_const(format!("{name}.beta"), &[channels], 0.0, true),
            running_mean: store.add_const(format!("{name}.running_mean"), &[channels], 0.0, false),
            running_var: store.add_const(format!("{name}.running_var"), &[channels], 1.0, false),
            channels,
        }
    }

    /// Core on a channel-major C × L matrix.
    fn forward_cl<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ctx: &mut Ctx<T>,
        x: Array2<T>,
    ) -> Result<(Array2<T>, BatchNormCache<T>)> {
        let (c, l) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let eps = T::lit(BN_EPS);
        let gamma = store.value1(self.gamma);
        let beta = store.value1(self.beta);
        let training = ctx.is_training();
        let (mean, var) = if training {
            if l < 2 {
                return Err(Error::Shape(
                    "batchnorm training needs at least 2 elements per channel".into(),
                ));
            }
            let n = T::lit(l as f64);
            let mean = x.sum_axis(Axis(1)) / n;
            let mut var = Array1::zeros(c);
            for (ch, row) in x.outer_iter().enumerate() {
                let m = mean[ch];
                var[ch] = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
            }
            let mom = T::lit(BN_MOMENTUM);
            let unbias = n / (n - T::one());
            let rm = store.value1(self.running_mean).to_owned() * mom + &mean * (T::one() - mom);
            let rv = store.value1(self.running_var).to_owned() * mom
                + &var * ((T::one() - mom) * unbias);
            ctx.push_stat(self.running_mean, rm.into_dyn());
            ctx.push_stat(self.running_var, rv.into_dyn());
            (mean, var)
        } else {
            (
                store.value1(self.running_mean).to_owned(),
                store.value1(self.running_var).to_owned(),
            )
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut xhat = x;
        let mut y = Array2::zeros((c, l));
        for ch in 0..c {
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (xh, yo) in xhat.row_mut(ch).iter_mut().zip(y.row_mut(ch).iter_mut()) {
                *xh = (*xh - m) * is;
                *yo = g * *xh + b;
            }
        }
        Ok((
            y,
            BatchNormCache {
                xhat,
                inv_std,
                training,
            },
        ))
    }

    fn backward_cl<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &BatchNormCache<T>,
        dy: Array2<T>,
    ) -> Array2<T> {
        let (c, l) = dy.dim();
        let n = T::lit(l as f64);
        let gamma = store.value1(self.gamma).to_owned();
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        let mut dx = dy;
        for ch in 0..c {
            let xh = cache.xhat.row(ch);
            let mut row = dx.row_mut(ch);
            let sum_dy: T = row.iter().copied().sum();
            let sum_dy_xh: T = row.iter().zip(xh.iter()).map(|(&d, &x)| d * x).sum();
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let g = gamma[ch];
            let is = cache.inv_std[ch];
            if cache.training {
                // dxhat = dy * gamma; dx = is/n (n dxhat - sum dxhat - xhat sum(dxhat xhat))
                let (s1, s2) = (sum_dy * g, sum_dy_xh * g);
                for (d, &x) in row.iter_mut().zip(xh.iter()) {
                    *d = is / n * (n * *d * g - s1 - x * s2);
                }
            } else {
                row.mapv_inplace(|d| d * g * is);
            }
        }
        *store.grad_mut(self.gamma) += &dgamma.into_dyn();
        *store.grad_mut(self.beta) += &dbeta.into_dyn();
        dx
    }

    /// M × C input, statistics per column.
    pub fn forward2<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ctx: &mut Ctx<T>,
        x: ArrayView2<T>,
    ) -> Result<(Array2<T>, BatchNormCache<T>)> {
        let cl = x.t().as_standard_layout().into_owned();
        let (y, cache) = self.forward_cl(store, ctx, cl)?;
        Ok((y.t().as_standard_layout().into_owned(), cache))
    }

    pub fn backward2<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &BatchNormCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let cl = dy.t().as_standard_layout().into_owned();
        self.backward_cl(store, cache, cl).t().as_standard_layout().into_owned()
    }

    /// N × C × H × W input, statistics per channel plane.
    pub fn forward4<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ctx: &mut Ctx<T>,
        x: ArrayView4<T>,
    ) -> Result<(Array4<T>, BatchNormCache<T>)> {
        let (n, c, h, w) = x.dim();
        let cl = to_channel_major(x);
        let (y, cache) = self.forward_cl(store, ctx, cl)?;
        Ok((from_channel_major(y, (n, c, h, w)), cache))
    }

    pub fn backward4<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &BatchNormCache<T>,
        dy: &Array4<T>,
    ) -> Array4<T> {
        let dims = dy.dim();
        let cl = to_channel_major(dy.view());
        from_channel_major(self.backward_cl(store, cache, cl), dims)
    }
}

fn to_channel_major<T: Scalar>(x: ArrayView4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    x.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape((c, n * h * w))
        .expect("contiguous")
}

fn from_channel_major<T: Scalar>(y: Array2<T>, (n, c, h, w): (usize, usize, usize, usize)) -> Array4<T> {
    y.into_shape((c, n, h, w))
        .expect("contiguous")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Mode};
    use rand::{Rng, SeedableRng};

    #[test]
    fn training_output_is_normalized() {
        let mut s = ParameterStore::<f64>::new();
        let bn = BatchNorm::new(&mut s, "bn", 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Array4::from_shape_fn((4, 3, 5, 5), |_| rng.gen_range(-3.0..7.0));
        let mut ctx = Ctx::training(0);
        let (y, _) = bn.forward4(&s, &mut ctx, x.view()).unwrap();
        for ch in 0..3 {
            let plane = y.index_axis(Axis(1), ch);
            let n = plane.len() as f64;
            let mean = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
        assert_eq!(ctx.pending_updates(), 2);
        ctx.commit(&mut s);
        // running stats moved towards the batch stats
        assert!(s.value1(bn.running_mean).iter().all(|&m| m.abs() > 0.0));
    }

    #[test]
    fn normalized_input_passes_through() {
        let mut s = ParameterStore::<f64>::new();
        let bn = BatchNorm::new(&mut s, "bn", 2);
        let x = ndarray::array![[1.0, -1.0], [-1.0, 1.0]];
        let (y, _) = bn.forward2(&s, &mut Ctx::training(0), x.view()).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn single_element_training_is_an_error() {
        let mut s = ParameterStore::<f64>::new();
        let bn = BatchNorm::new(&mut s, "bn", 2);
        let x = Array2::zeros((1, 2));
        assert!(bn.forward2(&s, &mut Ctx::training(0), x.view()).is_err());
        assert!(bn.forward2(&s, &mut Ctx::new(Mode::Inference, 0), x.view()).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut s = ParameterStore::<f64>::new();
        let bn = BatchNorm::new(&mut s, "bn", 3);
        // non-trivial scale/shift
        for id in [bn.gamma, bn.beta] {
            let v = s.value(id).mapv(|_| rng.gen_range(0.5..1.5));
            s.set_value(id, v);
        }
        let x = s.add_uniform("x", &[4, 3, 5, 5], 1, &mut rng);
        let coef = Array4::from_shape_fn((4, 3, 5, 5), |(a, b, c, d)| ((a * 75 + b * 25 + c * 5 + d) as f64 * 0.1).sin());
        for mode in [Mode::Training, Mode::Inference] {
            let rep = grad_check(&mut s, 1e-5, |s, backward| {
                let xv = s.value4(x).to_owned();
                let mut ctx = Ctx::new(mode, 0);
                let (y, cache) = bn.forward4(s, &mut ctx, xv.view())?;
                if backward {
                    let dx = bn.backward4(s, &cache, &coef);
                    *s.grad_mut(x) += &dx.into_dyn();
                }
                Ok((&y * &coef).sum())
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "{mode:?} {rep:?}");
        }
    }
}
