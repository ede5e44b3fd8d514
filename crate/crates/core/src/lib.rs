//! Diffusion autoencoding on top of a frozen pretrained denoiser.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grid;
pub mod model;
pub mod networks;
pub mod oracle;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use pdae_autograd as autograd;
pub use pdae_autograd::{Float, ParamStore, Tensor};

pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, PosteriorCoefficients, ScheduleSpec, WeightScheme};
