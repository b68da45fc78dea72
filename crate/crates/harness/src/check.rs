//! Identity and oracle battery run by `rcd check`.
//!
//! Each check draws its own random instances from a fixed seed and reports
//! the worst deviation it saw against a fixed threshold.

use crate::error::Result;
use rcd_core::guidance::{guidance_gradient_with_noise, objective_at, pairwise_overlap_mismatch, self_recon_error_with_noise};
use rcd_core::nn::random_small_mlp;
use rcd_core::rng::{normal_tensor, stream, Purpose, StreamRng};
use rcd_core::toy::BimodalToySpec;
use rcd_core::{GmmDenoiser, GuidanceConfig, NoiseSchedule, SegmentLayout, Tensor};
use rand::Rng;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn outcome(name: &'static str, value: f64, limit: f64, what: &str, below: bool) -> CheckOutcome {
    let passed = if below { value <= limit } else { value >= limit };
    let op = if below { "<=" } else { ">=" };
    CheckOutcome {
        name,
        passed,
        detail: format!("{what} {value:.3e} (need {op} {limit:.0e})"),
    }
}

struct Instance {
    layout: SegmentLayout,
    model: rcd_core::MlpDenoiser,
    x: Tensor,
    eps: Tensor,
    s: usize,
}

fn random_instance(rng: &mut StreamRng, schedule: &NoiseSchedule) -> Instance {
    let length = rng.random_range(2..6);
    let layout = SegmentLayout::new(
        rng.random_range(1..5),
        length,
        rng.random_range(1..=length / 2),
        rng.random_range(1..3),
    )
    .expect("valid layout");
    let model = random_small_mlp(layout.segment_width(), &[16, 16], 8, rng);
    let shape = [layout.horizon(), layout.dim];
    Instance {
        layout,
        model,
        x: normal_tensor(rng, &shape),
        eps: normal_tensor(rng, &shape),
        s: rng.random_range(1..=schedule.steps()),
    }
}

/// The reconstruction residual equals the scaled noise residual.
pub fn reconstruction_residual(schedule: &NoiseSchedule, instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, 0, Purpose::Aux);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let i = random_instance(&mut rng, schedule);
        let rec = self_recon_error_with_noise(&i.x, &i.eps, &i.model, &i.layout, schedule, i.s)?;
        let a = schedule.alpha_cum(i.s)?;
        let scale = -((1.0 - a) / a).sqrt();
        for k in 0..i.x.len() {
            let lhs = i.x.data()[k] - rec.x0_rec.data()[k];
            let rhs = scale * (i.eps.data()[k] - rec.eps_bar.data()[k]);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(outcome("reconstruction residual identity", worst, 1e-10, "max abs deviation", true))
}

/// Each pair's overlap mismatch equals the scaled squared score gap.
pub fn overlap_score_gap(schedule: &NoiseSchedule, instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, 1, Purpose::Aux);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let i = random_instance(&mut rng, schedule);
        let rec = self_recon_error_with_noise(&i.x, &i.eps, &i.model, &i.layout, schedule, i.s)?;
        let a = schedule.alpha_cum(i.s)?;
        let (l, o, d) = (i.layout.length, i.layout.overlap, i.layout.dim);
        for (k, m) in pairwise_overlap_mismatch(&rec.per_segment, &i.layout).iter().enumerate() {
            let left = &rec.per_segment_eps[k].data()[(l - o) * d..];
            let right = &rec.per_segment_eps[k + 1].data()[..o * d];
            let gap: f64 = left
                .iter()
                .zip(right)
                .map(|(p, q)| (-p / (1.0 - a).sqrt() + q / (1.0 - a).sqrt()).powi(2))
                .sum();
            worst = worst.max((m - (1.0 - a).powi(2) / a * gap).abs());
        }
    }
    Ok(outcome("overlap mismatch as score gap", worst, 1e-10, "max abs deviation", true))
}

/// `a/(1-a) * E_recon` equals the squared noise-prediction error.
pub fn density_summand(schedule: &NoiseSchedule, instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, 2, Purpose::Aux);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let i = random_instance(&mut rng, schedule);
        let rec = self_recon_error_with_noise(&i.x, &i.eps, &i.model, &i.layout, schedule, i.s)?;
        let a = schedule.alpha_cum(i.s)?;
        let direct: f64 = i.eps.data().iter().zip(rec.eps_bar.data()).map(|(e, b)| (e - b).powi(2)).sum();
        worst = worst.max((a / (1.0 - a) * rec.e_recon - direct).abs());
    }
    Ok(outcome("noise-prediction summand identity", worst, 1e-10, "max abs deviation", true))
}

/// Recorded guidance gradient against central differences of the
/// tape-free objective, worst relative error over all instances.
pub fn gradient_vs_differences(schedule: &NoiseSchedule, instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, 3, Purpose::Aux);
    let config = GuidanceConfig::default();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let i = random_instance(&mut rng, schedule);
        let t = rng.random_range(1..=schedule.steps());
        let g = guidance_gradient_with_noise(&i.x, t, &i.eps, &i.model, &i.layout, schedule, &config)?;
        let mut diff = 0.0f64;
        let mut norm = 0.0f64;
        for k in 0..i.x.len() {
            let mut up = i.x.clone();
            up.data_mut()[k] += h;
            let mut down = i.x.clone();
            down.data_mut()[k] -= h;
            let f_up = objective_at(&up, t, &i.eps, &i.model, &i.layout, schedule, &config)?;
            let f_down = objective_at(&down, t, &i.eps, &i.model, &i.layout, schedule, &config)?;
            let fd = (f_up - f_down) / (2.0 * h);
            diff = diff.max((fd - g.data()[k]).abs());
            norm = norm.max(g.data()[k].abs());
        }
        worst = worst.max(diff / norm.max(1e-12));
    }
    Ok(outcome("guidance gradient vs central differences", worst, 1e-4, "max relative error", true))
}

/// Mean `E_recon` of the inter-mode midpoint over a mode centre, exact
/// mixture denoiser, single segment.
pub fn density_proxy_ratio(schedule: &NoiseSchedule, probe_ratio: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let spec = BimodalToySpec::default();
    let model = GmmDenoiser::new(spec.interior_mixture()?);
    let layout = spec.layout(1)?;
    let s = schedule.probe_level(probe_ratio);
    let n = layout.horizon();
    let mid = Tensor::new(vec![n, 1], vec![0.0; n])?;
    let mode = Tensor::new(vec![n, 1], vec![spec.mode_offset; n])?;
    let mut rng = stream(seed, 4, Purpose::Aux);
    let (mut e_mid, mut e_mode) = (0.0, 0.0);
    for _ in 0..draws {
        let eps = normal_tensor(&mut rng, &[n, 1]);
        e_mid += self_recon_error_with_noise(&mid, &eps, &model, &layout, schedule, s)?.e_recon;
        e_mode += self_recon_error_with_noise(&mode, &eps, &model, &layout, schedule, s)?.e_recon;
    }
    Ok((e_mid / draws as f64, e_mode / draws as f64))
}

pub fn density_proxy(schedule: &NoiseSchedule, seed: u64) -> Result<CheckOutcome> {
    let (mid, mode) = density_proxy_ratio(schedule, GuidanceConfig::default().probe_ratio, 100, seed)?;
    Ok(outcome("midpoint vs mode reconstruction error", mid / mode, 3.0, "ratio", false))
}

/// The whole battery in a fixed order.
pub fn run_all(schedule: &NoiseSchedule, seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        reconstruction_residual(schedule, 200, seed)?,
        overlap_score_gap(schedule, 200, seed)?,
        density_summand(schedule, 200, seed)?,
        gradient_vs_differences(schedule, 50, seed)?,
        density_proxy(schedule, seed)?,
    ])
}
