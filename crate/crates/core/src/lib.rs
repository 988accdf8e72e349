pub mod checkpoint;
pub mod corpus;
pub mod dne;
pub mod diagnostics;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod trainer;
pub mod vad;
pub mod wav;

pub use error::{Error, Result};
