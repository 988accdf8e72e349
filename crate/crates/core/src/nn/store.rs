use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4, IxDyn};
use rand::Rng;

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
    /// Running statistics are stored here too but never see Adam.
    pub trainable: bool,
}

/// Named learnable arrays with gradient slots and Adam moments.
#[derive(Debug, Clone)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    pub step: u64,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let zeros = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Symmetric uniform init with bound `1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            T::lit(rng.gen_range(-bound..bound))
        });
        self.add(name, value, true)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], c: f64, trainable: bool) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), T::lit(c)), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    pub fn value1(&self, id: ParamId) -> ArrayView1<'_, T> {
        self.params[id.0].value.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn value2(&self, id: ParamId) -> ArrayView2<'_, T> {
        self.params[id.0].value.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn value4(&self, id: ParamId) -> ArrayView4<'_, T> {
        self.params[id.0].value.view().into_dimensionality::<Ix4>().expect("rank-4 parameter")
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Count of trainable values whose name starts with `prefix`.
    pub fn trainable_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Converts every array to another precision, keeping names and order.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let conv = |a: &ArrayD<T>| a.mapv(|x| U::lit(x.to_f64_lossy()));
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: conv(&p.value),
                    grad: conv(&p.grad),
                    m: conv(&p.m),
                    v: conv(&p.v),
                    trainable: p.trainable,
                })
                .collect(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grads_and_moments_start_at_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::<f64>::new();
        let id = s.add_uniform("w", &[3, 4], 4, &mut rng);
        let p = s.param(id);
        assert_eq!(p.grad.shape(), p.value.shape());
        assert!(p.m.iter().chain(p.v.iter()).all(|&x| x == 0.0));
        assert!(p.value.iter().all(|&x| x.abs() <= 0.5));
        assert_eq!(s.step, 0);
        assert_eq!(s.find("w"), Some(id));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParameterStore::<f32>::new();
        s.add_const("a", &[1], 0.0, true);
        s.add_const("a", &[1], 0.0, true);
    }
}
