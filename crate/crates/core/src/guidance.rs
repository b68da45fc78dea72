//! Self-reconstruction error, overlap consistency and the guidance gradient.
//!
//! A candidate clean plan `x0` is re-noised to a fixed probe level `s` with a
//! single Gaussian draw, denoised segment by segment, and merged back by
//! overlap averaging. Plans that sit in low-density regions of the composed
//! model reconstruct poorly (`E_recon`), and segments that disagree about
//! their shared variables show up in `E_ov`. The guidance gradient
//! differentiates `E_recon + lambda_ov * E_ov`, evaluated at the current
//! Tweedie estimate, with respect to the noisy plan `x_t`.
//!
//! The single-plan functions here work on `[N, D]` tensors and are what the
//! identity tests use; the batched [`guidance_batch`] is what the sampler calls.

use crate::autodiff::{Tape, Var};
use crate::composition::{merge_clean_estimates, BatchIndex, SegmentLayout};
use crate::denoiser::Denoiser;
use crate::diffusion::{record_tweedie, tweedie_estimate};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Guidance weight `w >= 0`.
    pub w: f64,
    /// Weight of the overlap-consistency term.
    pub lambda_ov: f64,
    /// Probe level as a fraction of `T`: `s = round(probe_ratio * T)`.
    pub probe_ratio: f64,
    /// Added to `||g||_inf` before normalizing.
    pub delta: f64,
    /// Treat the level-`t` noise prediction as a constant when differentiating.
    pub stop_grad_tweedie: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            w: 0.25,
            lambda_ov: 0.5,
            probe_ratio: 0.4,
            delta: 1e-8,
            stop_grad_tweedie: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(Error::Config(format!("w must be a finite value >= 0, got {}", self.w)));
        }
        if !(self.lambda_ov >= 0.0) || !self.lambda_ov.is_finite() {
            return Err(Error::Config(format!("lambda_ov must be >= 0, got {}", self.lambda_ov)));
        }
        if !(self.probe_ratio > 0.0 && self.probe_ratio < 1.0) {
            return Err(Error::Config(format!("probe_ratio must lie in (0, 1), got {}", self.probe_ratio)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    pub fn probe_level(&self, schedule: &NoiseSchedule) -> Result<usize> {
        self.validate()?;
        Ok(schedule.probe_level(self.probe_ratio))
    }
}

/// Everything produced by one reconstruction pass on a single plan.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `||x0 - x0_rec||^2`.
    pub e_recon: f64,
    /// Per-segment clean estimates at the probe level, each `[L, D]`.
    pub per_segment: Vec<Tensor>,
    /// Per-segment noise predictions at the probe level, each `[L, D]`.
    pub per_segment_eps: Vec<Tensor>,
    /// The Monte-Carlo noise that was used, `[N, D]`.
    pub eps: Tensor,
    /// `sqrt(a_s) x0 + sqrt(1 - a_s) eps`.
    pub x_s: Tensor,
    /// Composed noise prediction at the probe level.
    pub eps_bar: Tensor,
    /// Merged reconstruction.
    pub x0_rec: Tensor,
}

fn check_model(model: &dyn Denoiser, layout: &SegmentLayout) -> Result<()> {
    layout.validate()?;
    if model.segment_width() != layout.segment_width() {
        return Err(Error::Config(format!(
            "denoiser expects segments of width {}, layout has L*D = {}",
            model.segment_width(),
            layout.segment_width()
        )));
    }
    Ok(())
}

fn check_probe(s: usize, schedule: &NoiseSchedule) -> Result<()> {
    if s == 0 || s > schedule.steps() {
        return Err(Error::Timestep { t: s, max: schedule.steps() });
    }
    Ok(())
}

/// Reconstruction pass with an explicit noise draw.
pub fn self_recon_error_with_noise(
    x0_hat: &Tensor,
    eps: &Tensor,
    model: &dyn Denoiser,
    layout: &SegmentLayout,
    schedule: &NoiseSchedule,
    s: usize,
) -> Result<Reconstruction> {
    check_model(model, layout)?;
    check_probe(s, schedule)?;
    let shape = [layout.horizon(), layout.dim];
    if x0_hat.len() != layout.plan_width() || eps.len() != layout.plan_width() {
        return Err(Error::shape("self_recon_error", &shape, x0_hat.shape()));
    }
    let x0_hat = x0_hat.clone().reshape(&shape)?;
    let eps = eps.clone().reshape(&shape)?;
    let a = schedule.alpha_cum(s)?;
    let x_s = x0_hat.axpby(a.sqrt(), &eps, (1.0 - a).sqrt())?;
    let index = layout.batch_index(1);
    let seg_s = index.extract(&x_s.clone().reshape(&[1, layout.plan_width()])?)?;
    let seg_eps = model.predict(&seg_s, s, schedule)?;
    let seg_x0 = tweedie_estimate(&seg_eps, &seg_s, s, schedule)?;
    let eps_bar = index.compose(&seg_eps)?.reshape(&shape)?;
    let split = |t: &Tensor| {
        (0..layout.segments)
            .map(|j| Tensor::new(vec![layout.length, layout.dim], t.row(j).to_vec()))
            .collect::<Result<Vec<_>>>()
    };
    let per_segment = split(&seg_x0)?;
    let per_segment_eps = split(&seg_eps)?;
    let x0_rec = merge_clean_estimates(&per_segment, layout)?;
    let e_recon = x0_hat.sub(&x0_rec)?.sum_squares();
    Ok(Reconstruction {
        e_recon,
        per_segment,
        per_segment_eps,
        eps,
        x_s,
        eps_bar,
        x0_rec,
    })
}

/// Draws one Gaussian `eps` from `rng` and runs the reconstruction pass.
pub fn self_recon_error<R: Rng + ?Sized>(
    x0_hat: &Tensor,
    model: &dyn Denoiser,
    layout: &SegmentLayout,
    schedule: &NoiseSchedule,
    s: usize,
    rng: &mut R,
) -> Result<Reconstruction> {
    let eps = rng::normal_tensor(rng, &[layout.horizon(), layout.dim]);
    self_recon_error_with_noise(x0_hat, &eps, model, layout, schedule, s)
}

/// Mean over adjacent pairs of the squared distance between the two
/// segments' estimates on their shared variables; 0 for a single segment.
pub fn overlap_consistency(per_segment_x0: &[Tensor], layout: &SegmentLayout) -> Result<f64> {
    layout.validate()?;
    if per_segment_x0.len() != layout.segments {
        return Err(Error::shape("overlap_consistency", &[layout.segments], &[per_segment_x0.len()]));
    }
    for seg in per_segment_x0 {
        if seg.len() != layout.segment_width() {
            return Err(Error::shape("overlap_consistency", &[layout.length, layout.dim], seg.shape()));
        }
    }
    if layout.segments < 2 {
        return Ok(0.0);
    }
    Ok(pairwise_overlap_mismatch(per_segment_x0, layout).iter().sum::<f64>() / (layout.segments - 1) as f64)
}

/// Squared overlap distance for each adjacent pair `(k, k+1)`.
pub fn pairwise_overlap_mismatch(per_segment: &[Tensor], layout: &SegmentLayout) -> Vec<f64> {
    let (l, o, d) = (layout.length, layout.overlap, layout.dim);
    per_segment
        .windows(2)
        .map(|w| {
            let left = &w[0].data()[(l - o) * d..l * d];
            let right = &w[1].data()[..o * d];
            left.iter().zip(right).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcdTerms {
    pub e_recon: f64,
    pub e_ov: f64,
    pub total: f64,
}

/// `E_recon + lambda_ov * E_ov` from one shared reconstruction pass.
pub fn rcd_objective<R: Rng + ?Sized>(
    x0_hat: &Tensor,
    model: &dyn Denoiser,
    layout: &SegmentLayout,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<RcdTerms> {
    let s = config.probe_level(schedule)?;
    let rec = self_recon_error(x0_hat, model, layout, schedule, s, rng)?;
    let e_ov = overlap_consistency(&rec.per_segment, layout)?;
    Ok(RcdTerms {
        e_recon: rec.e_recon,
        e_ov,
        total: rec.e_recon + config.lambda_ov * e_ov,
    })
}

/// Handles into a recorded objective for a batch of plans.
#[derive(Debug, Clone, Copy)]
pub struct RecordedObjective {
    /// Scalar sum over plans of `E_recon + lambda_ov * E_ov`.
    pub total: Var,
    /// `x0 - x0_rec`, `[B, N*D]`.
    pub recon_diff: Var,
    /// Left-minus-right overlap differences, absent when `M = 1`.
    pub overlap_diff: Option<Var>,
}

/// Records the objective for a batch of clean estimates `x0` (`[B, N*D]`)
/// with fixed probe noise `eps` of the same shape.
pub fn record_rcd_objective(
    tape: &mut Tape,
    x0: Var,
    eps: &Tensor,
    model: &dyn Denoiser,
    index: &BatchIndex,
    schedule: &NoiseSchedule,
    lambda_ov: f64,
    s: usize,
) -> Result<RecordedObjective> {
    check_probe(s, schedule)?;
    if eps.len() != tape.value(x0).len() {
        return Err(Error::shape("record_rcd_objective", tape.value(x0).shape(), eps.shape()));
    }
    let a = schedule.alpha_cum(s)?;
    let eps = tape.constant(eps.clone().reshape(&index.plans_shape())?);
    let x_s = tape.axpby(a.sqrt(), x0, (1.0 - a).sqrt(), eps)?;
    let seg_s = index.record_extract(tape, x_s)?;
    let seg_eps = model.record(tape, seg_s, s, schedule)?;
    let seg_x0 = record_tweedie(tape, seg_eps, seg_s, s, schedule)?;
    let x0_rec = index.record_compose(tape, seg_x0)?;
    let recon_diff = tape.sub(x0, x0_rec)?;
    let recon = tape.sum_squares(recon_diff)?;
    if index.layout.segments < 2 {
        return Ok(RecordedObjective {
            total: recon,
            recon_diff,
            overlap_diff: None,
        });
    }
    let ov = index.record_overlap_difference(tape, seg_x0)?;
    let ov_sq = tape.sum_squares(ov)?;
    let total = tape.axpby(1.0, recon, lambda_ov / (index.layout.segments - 1) as f64, ov_sq)?;
    Ok(RecordedObjective {
        total,
        recon_diff,
        overlap_diff: Some(ov),
    })
}

/// Result of one batched guidance evaluation at level `t`.
#[derive(Debug, Clone)]
pub struct GuidanceBatch {
    /// `d E_RCD / d x_t` per plan, `[B, N*D]`.
    pub grad: Tensor,
    /// Composed noise prediction at level `t`, reusable for the reverse mean.
    pub eps_bar: Tensor,
    pub e_recon: Vec<f64>,
    pub e_ov: Vec<f64>,
}

/// Guidance gradient for a batch of noisy plans `x_t` (`[B, N*D]`) with fixed
/// probe noise `eps`. Plans never interact, so the gradient of the summed
/// objective is the per-plan gradient.
pub fn guidance_batch(
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
    model: &dyn Denoiser,
    index: &BatchIndex,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<GuidanceBatch> {
    let s = config.probe_level(schedule)?;
    check_model(model, &index.layout)?;
    if t == 0 {
        return Err(Error::Timestep { t, max: schedule.steps() });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(x_t.clone().reshape(&index.plans_shape())?);
    let seg = index.record_extract(&mut tape, x)?;
    let seg_eps = model.record(&mut tape, seg, t, schedule)?;
    let mut eps_bar = index.record_compose(&mut tape, seg_eps)?;
    if config.stop_grad_tweedie {
        eps_bar = tape.detach(eps_bar);
    }
    let x0 = record_tweedie(&mut tape, eps_bar, x, t, schedule)?;
    let obj = record_rcd_objective(&mut tape, x0, eps, model, index, schedule, config.lambda_ov, s)?;
    let grads = tape.backward(obj.total)?;
    let grad = grads.get_or_zeros(x, tape.value(x));
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "guidance_gradient" });
    }
    let b = index.batch;
    let diff = tape.value(obj.recon_diff);
    let e_recon = (0..b).map(|i| diff.row(i).iter().map(|v| v * v).sum()).collect();
    let e_ov = match obj.overlap_diff {
        None => vec![0.0; b],
        Some(v) => {
            let ow = index.overlap_width();
            let pairs = (index.layout.segments - 1) as f64;
            tape.value(v)
                .data()
                .chunks(ow)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>() / pairs)
                .collect()
        }
    };
    Ok(GuidanceBatch {
        grad,
        eps_bar: tape.value(eps_bar).clone(),
        e_recon,
        e_ov,
    })
}

/// Gradient of `E_RCD` at the Tweedie estimate of `x_t` (`[N, D]`) with
/// respect to `x_t`, for a given probe noise.
pub fn guidance_gradient_with_noise(
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
    model: &dyn Denoiser,
    layout: &SegmentLayout,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<Tensor> {
    if x_t.len() != layout.plan_width() {
        return Err(Error::shape("guidance_gradient", &[layout.horizon(), layout.dim], x_t.shape()));
    }
    let out = guidance_batch(x_t, t, eps, model, &layout.batch_index(1), schedule, config)?;
    out.grad.reshape(&[layout.horizon(), layout.dim])
}

/// As [`guidance_gradient_with_noise`], drawing the probe noise from `rng`.
pub fn guidance_gradient<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: usize,
    model: &dyn Denoiser,
    layout: &SegmentLayout,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let eps = rng::normal_tensor(rng, &[layout.horizon(), layout.dim]);
    guidance_gradient_with_noise(x_t, t, &eps, model, layout, schedule, config)
}

/// `g / (||g||_inf + delta)`.
pub fn normalize_gradient(g: &[f64], delta: f64) -> Vec<f64> {
    let m = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    g.iter().map(|v| v / (m + delta)).collect()
}

/// Scalar `E_RCD` of a tape-free evaluation, used for finite differences.
pub fn objective_at(
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
    model: &dyn Denoiser,
    layout: &SegmentLayout,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<f64> {
    let s = config.probe_level(schedule)?;
    let index = layout.batch_index(1);
    let flat = x_t.clone().reshape(&index.plans_shape())?;
    let seg = index.extract(&flat)?;
    let eps_bar = index.compose(&model.predict(&seg, t, schedule)?)?;
    let x0 = tweedie_estimate(&eps_bar, &flat, t, schedule)?;
    let rec = self_recon_error_with_noise(&x0, eps, model, layout, schedule, s)?;
    let e_ov = overlap_consistency(&rec.per_segment, layout)?;
    Ok(rec.e_recon + config.lambda_ov * e_ov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::random_small_mlp;
    use crate::rng::{normal_tensor, stream, Purpose};

    /// Returns a fixed noise for every input; with that noise injected the
    /// reconstruction is exact.
    struct FixedNoise(Tensor);

    impl Denoiser for FixedNoise {
        fn segment_width(&self) -> usize {
            self.0.cols()
        }
        fn predict(&self, segments: &Tensor, _t: usize, _s: &NoiseSchedule) -> Result<Tensor> {
            Ok(Tensor::new(segments.shape().to_vec(), self.0.data().to_vec()).unwrap())
        }
        fn record(&self, tape: &mut Tape, segments: Var, t: usize, s: &NoiseSchedule) -> Result<Var> {
            let v = self.predict(tape.value(segments), t, s)?;
            Ok(tape.constant(v))
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = GuidanceConfig::default();
        assert_eq!((c.w, c.lambda_ov, c.probe_ratio, c.delta), (0.25, 0.5, 0.4, 1e-8));
        assert!(c.validate().is_ok());
        for bad in [
            GuidanceConfig { w: -1.0, ..c },
            GuidanceConfig { lambda_ov: -0.1, ..c },
            GuidanceConfig { probe_ratio: 1.0, ..c },
            GuidanceConfig { delta: 0.0, ..c },
        ] {
            assert!(bad.validate().is_err());
        }
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(c.probe_level(&s).unwrap(), 40);
    }

    #[test]
    fn exact_noise_gives_zero_error() {
        let lay = SegmentLayout::new(3, 3, 1, 2).unwrap();
        let sched = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let mut r = stream(1, 0, Purpose::Aux);
        let x0 = normal_tensor(&mut r, &[lay.horizon(), 2]);
        // a constant eps over the plan is consistent with every segment
        let eps = Tensor::full(&[lay.horizon(), 2], 0.3);
        let model = FixedNoise(Tensor::full(&[3, 6], 0.3));
        let rec = self_recon_error_with_noise(&x0, &eps, &model, &lay, &sched, 8).unwrap();
        assert!(rec.e_recon < 1e-24);
        assert!(overlap_consistency(&rec.per_segment, &lay).unwrap() < 1e-24);
    }

    #[test]
    fn overlap_consistency_hand_values() {
        let lay = SegmentLayout::new(2, 3, 1, 1).unwrap();
        let a = Tensor::new(vec![3, 1], vec![0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(overlap_consistency(&[a.clone(), b], &lay).unwrap(), 4.0);
        let agree = Tensor::new(vec![3, 1], vec![1.0, 5.0, 7.0]).unwrap();
        assert_eq!(overlap_consistency(&[a.clone(), agree], &lay).unwrap(), 0.0);
        let one = SegmentLayout::new(1, 3, 1, 1).unwrap();
        assert_eq!(overlap_consistency(&[a], &one).unwrap(), 0.0);
    }

    #[test]
    fn objective_combines_terms_linearly() {
        let lay = SegmentLayout::new(3, 4, 2, 1).unwrap();
        let sched = NoiseSchedule::linear(30, 1e-3, 0.1).unwrap();
        let mut r = stream(2, 0, Purpose::Aux);
        let model = random_small_mlp(4, &[8], 4, &mut r);
        let x0 = normal_tensor(&mut r, &[lay.horizon(), 1]);
        let c = GuidanceConfig::default();
        let a = rcd_objective(&x0, &model, &lay, &sched, &c, &mut stream(5, 0, Purpose::Probe)).unwrap();
        assert!((a.total - (a.e_recon + 0.5 * a.e_ov)).abs() < 1e-12);
        let c0 = GuidanceConfig { lambda_ov: 0.0, ..c };
        let b = rcd_objective(&x0, &model, &lay, &sched, &c0, &mut stream(5, 0, Purpose::Probe)).unwrap();
        assert_eq!(b.total, a.e_recon);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lay = SegmentLayout::new(3, 3, 1, 2).unwrap();
        let sched = NoiseSchedule::linear(40, 1e-3, 0.08).unwrap();
        let mut r = stream(3, 0, Purpose::Aux);
        let model = random_small_mlp(6, &[10, 10], 4, &mut r);
        let c = GuidanceConfig::default();
        let x = normal_tensor(&mut r, &[lay.horizon(), 2]);
        let eps = normal_tensor(&mut r, &[lay.horizon(), 2]);
        let g = guidance_gradient_with_noise(&x, 25, &eps, &model, &lay, &sched, &c).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let fp = objective_at(&p, 25, &eps, &model, &lay, &sched, &c).unwrap();
            p.data_mut()[i] -= 2.0 * h;
            let fm = objective_at(&p, 25, &eps, &model, &lay, &sched, &c).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = g.data()[i];
            assert!((an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3), "{i}: {an} vs {fd}");
        }
    }

    #[test]
    fn stop_gradient_changes_the_gradient() {
        let lay = SegmentLayout::new(2, 2, 1, 1).unwrap();
        let sched = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let mut r = stream(4, 0, Purpose::Aux);
        let model = random_small_mlp(2, &[6], 4, &mut r);
        let x = normal_tensor(&mut r, &[3, 1]);
        let eps = normal_tensor(&mut r, &[3, 1]);
        let c = GuidanceConfig::default();
        let full = guidance_gradient_with_noise(&x, 10, &eps, &model, &lay, &sched, &c).unwrap();
        let sg = GuidanceConfig {
            stop_grad_tweedie: true,
            ..c
        };
        let part = guidance_gradient_with_noise(&x, 10, &eps, &model, &lay, &sched, &sg).unwrap();
        assert!(full.sub(&part).unwrap().max_abs() > 1e-8);
    }

    #[test]
    fn normalization_contract() {
        let g = normalize_gradient(&[4.0, -2.0, 1.0], 1e-8);
        assert!(g.iter().all(|v| v.abs() <= 1.0));
        assert!((g[0] - 1.0).abs() < 1e-8);
        assert_eq!(normalize_gradient(&[0.0, 0.0], 1e-8), vec![0.0, 0.0]);
    }

    #[test]
    fn batch_matches_single_plan_evaluation() {
        let lay = SegmentLayout::new(3, 3, 1, 1).unwrap();
        let sched = NoiseSchedule::linear(30, 1e-3, 0.1).unwrap();
        let mut r = stream(6, 0, Purpose::Aux);
        let model = random_small_mlp(3, &[8], 4, &mut r);
        let c = GuidanceConfig::default();
        let xs = normal_tensor(&mut r, &[2, lay.plan_width()]);
        let es = normal_tensor(&mut r, &[2, lay.plan_width()]);
        let out = guidance_batch(&xs, 12, &es, &model, &lay.batch_index(2), &sched, &c).unwrap();
        for b in 0..2 {
            let x = Tensor::from_vec(xs.row(b).to_vec());
            let e = Tensor::from_vec(es.row(b).to_vec());
            let g = guidance_gradient_with_noise(&x, 12, &e, &model, &lay, &sched, &c).unwrap();
            for (u, v) in g.data().iter().zip(out.grad.row(b)) {
                assert!((u - v).abs() < 1e-12);
            }
            let f = objective_at(&x, 12, &e, &model, &lay, &sched, &c).unwrap();
            assert!((f - (out.e_recon[b] + 0.5 * out.e_ov[b])).abs() < 1e-10);
        }
    }
}
