//! Forward noising, the ancestral reverse step, the clean-sample (Tweedie)
//! estimate and the noise-prediction training loss.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand::Rng;

/// `sqrt(a_t) * x0 + sqrt(1 - a_t) * eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let a = schedule.alpha_cum(t)?;
    x0.axpby(a.sqrt(), eps, (1.0 - a).sqrt())
}

/// `(x_t - sqrt(1 - a_t) * eps_hat) / sqrt(a_t)`.
pub fn tweedie_estimate(eps_hat: &Tensor, x_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::shape("tweedie_estimate", x_t.shape(), eps_hat.shape()));
    }
    let a = schedule.alpha_cum(t)?;
    if a <= 0.0 {
        return Err(Error::Singular { alpha: a });
    }
    let ra = a.sqrt();
    x_t.axpby(1.0 / ra, eps_hat, -(1.0 - a).sqrt() / ra)
}

/// Recorded version of [`tweedie_estimate`].
pub fn record_tweedie(tape: &mut Tape, eps_hat: Var, x_t: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
    let a = schedule.alpha_cum(t)?;
    if a <= 0.0 {
        return Err(Error::Singular { alpha: a });
    }
    let ra = a.sqrt();
    tape.axpby(1.0 / ra, x_t, -(1.0 - a).sqrt() / ra, eps_hat)
}

/// DDPM posterior mean `mu(x_t, t)` from a noise prediction.
pub fn reverse_mean(eps_hat: &Tensor, x_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Timestep { t, max: schedule.steps() });
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::shape("reverse_mean", x_t.shape(), eps_hat.shape()));
    }
    let a = schedule.alpha_cum(t)?;
    let beta = schedule.beta(t)?;
    let c = 1.0 / (1.0 - beta).sqrt();
    x_t.axpby(c, eps_hat, -c * beta / (1.0 - a).sqrt())
}

/// `mu + sigma_t * z`; `z` is only consulted when `sigma_t > 0`.
pub fn reverse_step_with_noise(
    eps_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    let mean = reverse_mean(eps_hat, x_t, t, schedule)?;
    let sigma = schedule.sigma(t)?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    match z {
        Some(z) => mean.axpby(1.0, z, sigma),
        None => Err(Error::Usage(format!("reverse step at t={t} needs noise"))),
    }
}

/// One ancestral step; draws `z` from `rng` only when `sigma_t > 0`.
pub fn reverse_step<R: Rng + ?Sized>(
    eps_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let z = if schedule.sigma(t)? > 0.0 {
        Some(rng::normal_tensor(rng, x_t.shape()))
    } else {
        None
    };
    reverse_step_with_noise(eps_hat, x_t, t, schedule, z.as_ref())
}

/// Monte-Carlo DDPM objective on a batch of flattened samples `[B, F]`.
///
/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per row, then returns the recorded
/// mean over rows of `||eps - predict(x_t, t)||^2`. `predict` receives the
/// noised batch (a constant on the tape) and the per-row timesteps.
pub fn ddpm_loss<R, F>(tape: &mut Tape, x0: &Tensor, schedule: &NoiseSchedule, rng: &mut R, predict: F) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Tape, Var, &[usize]) -> Result<Var>,
{
    let b = x0.rows();
    if b == 0 || x0.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let f = x0.cols();
    let steps = schedule.steps();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=steps)).collect();
    let eps = rng::normal_tensor(rng, &[b, f]);
    let mut xt = Vec::with_capacity(b * f);
    for (i, &t) in ts.iter().enumerate() {
        let a = schedule.alpha_cum(t)?;
        let (ra, rn) = (a.sqrt(), (1.0 - a).sqrt());
        xt.extend(x0.row(i).iter().zip(eps.row(i)).map(|(x, e)| ra * x + rn * e));
    }
    let xt = tape.constant(Tensor::new(vec![b, f], xt)?);
    let target = tape.constant(eps);
    let pred = predict(tape, xt, &ts)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.sum_squares(diff)?;
    tape.scale(sq, 1.0 / b as f64)
}
