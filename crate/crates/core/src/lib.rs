//! Compositional diffusion planning over overlapping trajectory segments.
//!
//! A short-horizon denoiser is trained on segments of length `L`; long plans are
//! sampled by running the reverse process on the whole chain and averaging the
//! per-segment noise predictions where segments overlap. On top of that the
//! [`guidance`] module steers each reverse step with the gradient of a
//! self-reconstruction error plus an overlap-consistency penalty, which pulls
//! plans away from the low-density "averaged" states that plain composition
//! produces when the local distribution is multimodal.
//!
//! Everything runs on the small dense-tensor / reverse-mode substrate in
//! [`tensor`] and [`autodiff`], in 64-bit floats.

pub mod autodiff;
pub mod checkpoint;
pub mod composition;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod guidance;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod toy;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use composition::SegmentLayout;
pub use denoiser::Denoiser;
pub use error::{Error, Result};
pub use gmm::{GaussianMixture, GmmDenoiser};
pub use guidance::GuidanceConfig;
pub use nn::{Activation, MlpDenoiser};
pub use sampler::{EndpointConstraint, PlanBatch, SampleOptions};
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
