use ndarray::{Array, Dimension, Zip};

use super::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and its output.
    pub fn derivative<T: Scalar>(self, pre: T, out: T) -> T {
        match self {
            Activation::None => T::one(),
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => out * (T::one() - out),
            Activation::Tanh => T::one() - out * out,
        }
    }

    pub fn forward<T: Scalar, D: Dimension>(self, pre: &Array<T, D>) -> Array<T, D> {
        pre.mapv(|x| self.apply(x))
    }

    /// Gradient w.r.t. the pre-activation.
    pub fn backward<T: Scalar, D: Dimension>(
        self,
        pre: &Array<T, D>,
        out: &Array<T, D>,
        grad_out: &Array<T, D>,
    ) -> Array<T, D> {
        if self == Activation::None {
            return grad_out.clone();
        }
        let mut g = grad_out.clone();
        Zip::from(&mut g)
            .and(pre)
            .and(out)
            .for_each(|g, &p, &o| *g = *g * self.derivative(p, o));
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [Activation; 5] = [
        Activation::None,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
    ];

    #[test]
    fn reference_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert!((Activation::LeakyRelu.apply(-1.0f64) + 0.01).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        for x in [-30.0f64, -5.0, 0.0, 5.0, 30.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for act in ALL {
            for &x in &[-2.3f64, -0.7, 0.4, 1.9] {
                let numeric = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let analytic = act.derivative(x, act.apply(x));
                assert!(
                    (numeric - analytic).abs() < 1e-6,
                    "{act:?} at {x}: {numeric} vs {analytic}"
                );
            }
        }
    }
}
