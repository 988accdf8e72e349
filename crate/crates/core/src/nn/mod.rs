//! Minimal differentiable layers with explicit forward caches and backward
//! passes. Layers hold [`ParamId`] handles into a [`ParameterStore`]; the
//! store owns values, gradients and Adam moments.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f64` for
//! gradient checking and `f32` for training.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod store;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::distributions::uniform::SampleUniform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use activation::Activation;
pub use adam::{adam_step, AdamConfig};
pub use batchnorm::BatchNorm;
pub use conv::{Conv2d, ConvTranspose2d};
pub use dense::Dense;
pub use dropout::Dropout;
pub use gradcheck::{grad_check, grad_check_sampled, GradReport};
pub use loss::{bce_loss, mse_loss};
pub use lstm::{BiLstm, Lstm};
pub use store::{ParamId, ParameterStore};

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + SampleUniform
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Per-forward state: train/inference flag, the dropout generator and the
/// batchnorm running-statistic updates collected during the pass.
pub struct Ctx<T> {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    stat_updates: Vec<(ParamId, ArrayD<T>)>,
}

impl<T: Scalar> Ctx<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Ctx {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference, 0)
    }

    pub fn training(seed: u64) -> Self {
        Self::new(Mode::Training, seed)
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Training
    }

    pub(crate) fn push_stat(&mut self, id: ParamId, value: ArrayD<T>) {
        self.stat_updates.push((id, value));
    }

    /// Writes collected running statistics into the store.
    pub fn commit(&mut self, store: &mut ParameterStore<T>) {
        for (id, value) in self.stat_updates.drain(..) {
            store.set_value(id, value);
        }
    }

    pub fn pending_updates(&self) -> usize {
        self.stat_updates.len()
    }
}
