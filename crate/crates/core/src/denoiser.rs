use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{MlpDenoiser, Timesteps};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// A segment-level noise predictor `eps(y_t, t)`.
///
/// Implementations take a batch of flattened segments `[rows, L*D]` and must
/// be pure: parameters are never mutated while predicting, so one denoiser
/// can be shared by concurrent chains.
pub trait Denoiser: Send + Sync {
    fn segment_width(&self) -> usize;

    fn predict(&self, segments: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor>;

    /// Same as [`Denoiser::predict`], recorded so gradients flow back to `segments`.
    fn record(&self, tape: &mut Tape, segments: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var>;
}

impl Denoiser for MlpDenoiser {
    fn segment_width(&self) -> usize {
        self.data_width()
    }

    fn predict(&self, segments: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        self.forward(segments, Timesteps::Shared(t), schedule.steps())
    }

    fn record(&self, tape: &mut Tape, segments: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
        let params = self.param_vars(tape, false);
        self.record_with(tape, &params, segments, Timesteps::Shared(t), schedule.steps())
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn segment_width(&self) -> usize {
        (**self).segment_width()
    }

    fn predict(&self, segments: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        (**self).predict(segments, t, schedule)
    }

    fn record(&self, tape: &mut Tape, segments: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
        (**self).record(tape, segments, t, schedule)
    }
}
