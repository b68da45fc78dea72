//! Noise-prediction training of an [`MlpDenoiser`] on flattened segments.

use crate::autodiff::Tape;
use crate::diffusion::ddpm_loss;
use crate::error::{Error, Result};
use crate::nn::{MlpDenoiser, Timesteps};
use crate::optim::{adam_step, AdamState};
use crate::rng::{stream, Purpose};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`; the rate follows a cosine
    /// from `lr` down to `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 256,
            lr: 2e-3,
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("training needs steps > 0 and batch_size > 0".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!(
                "bad learning rate settings lr={} final_lr_fraction={}",
                self.lr, self.final_lr_fraction
            )));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let p = step as f64 / self.steps.max(1) as f64;
        let f = self.final_lr_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

/// Trains `model` in place on rows of `data` (`[count, L*D]`) and returns the
/// per-step training loss. Minibatches are drawn with replacement; all
/// randomness comes from the auxiliary stream of `config.seed`.
pub fn train_denoiser(
    model: &mut MlpDenoiser,
    data: &Tensor,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let width = model.data_width();
    if data.rows() == 0 || data.cols() != width {
        return Err(Error::shape("train_denoiser", &[data.rows(), width], data.shape()));
    }
    let mut rng = stream(config.seed, 0, Purpose::Aux);
    let mut adam = AdamState::new(&model.params(), config.lr)?;
    let mut losses = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(config.batch_size * width);
    for step in 0..config.steps {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.extend_from_slice(data.row(rng.random_range(0..data.rows())));
        }
        let x0 = Tensor::new(vec![config.batch_size, width], batch.clone())?;
        let mut tape = Tape::new();
        let params = model.param_vars(&mut tape, true);
        let loss = ddpm_loss(&mut tape, &x0, schedule, &mut rng, |tape, xt, ts| {
            model.record_with(tape, &params, xt, Timesteps::PerRow(ts), schedule.steps())
        })?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training_loss" });
        }
        let grads = tape.backward(loss)?;
        let gs: Vec<Tensor> = params
            .iter()
            .zip(model.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        adam.lr = config.lr_at(step);
        adam_step(&mut model.params_mut(), &gs, &mut adam)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Moving average with a trailing window, for smoothing loss curves.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}
