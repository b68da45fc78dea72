//! Noise schedules.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy level and `t = T` the
//! noisiest. `t = 0` denotes clean data (`alpha_cum = 1`) wherever a level
//! is accepted.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Lowest cumulative signal level kept by any schedule, so the clean-sample
/// estimate never divides by zero.
pub const ALPHA_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleDescriptor {
    Linear {
        #[serde(rename = "T")]
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_cum: Vec<f64>,
    sigma: Vec<f64>,
    descriptor: Option<ScheduleDescriptor>,
}

impl NoiseSchedule {
    /// Linear `beta` ramp from `beta_start` to `beta_end` over `steps` levels.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_cum = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_cum.push(prod);
        }
        let mut s = Self::from_alpha_cum(alpha_cum)?;
        s.descriptor = Some(ScheduleDescriptor::Linear {
            steps,
            beta_start,
            beta_end,
        });
        Ok(s)
    }

    pub fn from_descriptor(d: &ScheduleDescriptor) -> Result<Self> {
        match *d {
            ScheduleDescriptor::Linear {
                steps,
                beta_start,
                beta_end,
            } => Self::linear(steps, beta_start, beta_end),
        }
    }

    /// Builds a schedule from cumulative signal levels `alpha_cum[t-1]`.
    ///
    /// Values below [`ALPHA_FLOOR`] are clamped; per-step betas and the
    /// posterior standard deviations are derived from the clamped sequence.
    pub fn from_alpha_cum(mut alpha_cum: Vec<f64>) -> Result<Self> {
        if alpha_cum.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        let mut prev = 1.0;
        for a in alpha_cum.iter_mut() {
            if !(*a > 0.0 && *a < 1.0) {
                return Err(Error::Config(format!("alpha_cum values must lie in (0, 1), got {a}")));
            }
            *a = a.max(ALPHA_FLOOR);
            if *a >= prev {
                return Err(Error::Config(
                    "alpha_cum must be strictly decreasing (above the floor)".into(),
                ));
            }
            prev = *a;
        }
        let mut betas = Vec::with_capacity(alpha_cum.len());
        let mut sigma = Vec::with_capacity(alpha_cum.len());
        let mut prev = 1.0;
        for &a in &alpha_cum {
            let beta = 1.0 - a / prev;
            // posterior variance of q(x_{t-1} | x_t, x_0)
            let var = (1.0 - prev) / (1.0 - a) * beta;
            betas.push(beta);
            sigma.push(var.max(0.0).sqrt());
            prev = a;
        }
        Ok(NoiseSchedule {
            betas,
            alpha_cum,
            sigma,
            descriptor: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha_cum.len()
    }

    pub fn descriptor(&self) -> Option<ScheduleDescriptor> {
        self.descriptor
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(())
    }

    /// Cumulative signal level at `t` (1 at `t = 0`).
    pub fn alpha_cum(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_cum[t - 1] })
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        if t == 0 {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(self.betas[t - 1])
    }

    /// Reverse-process standard deviation used when stepping from `t` to `t - 1`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        if t == 0 {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(self.sigma[t - 1])
    }

    pub fn alpha_cum_all(&self) -> &[f64] {
        &self.alpha_cum
    }

    /// Probe level `round(ratio * T)`, clamped into `[1, T]`.
    pub fn probe_level(&self, ratio: f64) -> usize {
        ((ratio * self.steps() as f64).round() as usize).clamp(1, self.steps())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_cum(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_cum(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_cum(0).unwrap(), 1.0);
        // the last reverse step is deterministic
        assert_eq!(s.sigma(1).unwrap(), 0.0);
        // beta~_2 = (1 - 0.9) / (1 - 0.72) * 0.2
        let want = (0.1f64 / 0.28 * 0.2).sqrt();
        assert!((s.sigma(2).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn thousand_steps() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.probe_level(0.4), 400);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_alpha_cum(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn floor_applies_to_tail() {
        let s = NoiseSchedule::from_alpha_cum(vec![0.5, 0.01, 1e-7]).unwrap();
        assert_eq!(s.alpha_cum(3).unwrap(), ALPHA_FLOOR);
        // several levels collapsing onto the floor is not a valid schedule
        assert!(NoiseSchedule::linear(50, 0.5, 0.9).is_err());
    }

    #[test]
    fn out_of_range_timestep() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        assert!(matches!(s.alpha_cum(5), Err(Error::Timestep { .. })));
    }

    #[test]
    fn descriptor_round_trip() {
        let s = NoiseSchedule::linear(256, 1e-4, 0.04).unwrap();
        let d = s.descriptor().unwrap();
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"kind\":\"linear\""));
        assert!(json.contains("\"T\":256"));
        let back: ScheduleDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(NoiseSchedule::from_descriptor(&back).unwrap(), s);
    }
}
