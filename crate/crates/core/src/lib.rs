//! A small laboratory for variational diffusion models on low-dimensional
//! data: Gaussian diffusion algebra, output parameterizations, loss
//! estimators, noise schedules, analytic oracles and a VAE baseline.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod oracle;
pub mod param;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Result, VdmError};
pub use param::{Prediction, PredictionKind};
pub use schedule::{NoiseSchedule, ScheduleSample, WeightingFn};
pub use tensor::Tensor;
