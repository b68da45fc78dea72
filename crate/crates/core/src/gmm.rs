//! Isotropic Gaussian mixtures: exact log-density, score and the
//! Bayes-optimal (posterior-mean) denoiser under `x_t = sqrt(a) x0 + sqrt(1-a) eps`.
//!
//! These are closed forms, used as the reference everywhere a density or an
//! ideal denoiser is needed.

use crate::autodiff::{CustomOp, Tape, Var};
use crate::composition::SegmentLayout;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

impl TryFrom<Vec<Component>> for GaussianMixture {
    type Error = Error;

    fn try_from(c: Vec<Component>) -> Result<Self> {
        GaussianMixture::new(c)
    }
}

impl From<GaussianMixture> for Vec<Component> {
    fn from(g: GaussianMixture) -> Self {
        g.components
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture components need a non-empty mean".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::Config("mixture components disagree on dimension".into()));
            }
            if !(c.weight > 0.0) || !(c.std > 0.0) {
                return Err(Error::Config(format!(
                    "component weight and std must be positive, got {} and {}",
                    c.weight, c.std
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(GaussianMixture { components, dim })
    }

    /// Equal-weight mixture with a shared std.
    pub fn uniform(means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(means.into_iter().map(|mean| Component { weight: w, mean, std }).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let var = c.std * c.std;
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight.ln() - 0.5 * sq / var - 0.5 * d * (2.0 * PI * var).ln()
            })
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape("gmm", &[self.dim], &[x.len()]));
        }
        Ok(())
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(softmax(&self.component_log_terms(x)))
    }

    /// Exact `grad log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let mut out = vec![0.0; self.dim];
        for (rk, c) in r.iter().zip(&self.components) {
            let var = c.std * c.std;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += rk * (mi - xi) / var;
            }
        }
        Ok(out)
    }

    /// Marginal over the listed coordinates.
    pub fn marginal(&self, coords: &[usize]) -> Result<Self> {
        if coords.is_empty() || coords.iter().any(|&c| c >= self.dim) {
            return Err(Error::Config(format!("bad marginal coordinates {coords:?}")));
        }
        Self::new(
            self.components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: coords.iter().map(|&i| c.mean[i]).collect(),
                    std: c.std,
                })
                .collect(),
        )
    }

    /// Distribution of `sqrt(a) x0 + sqrt(1-a) eps` for `x0` from this mixture.
    pub fn noised(&self, alpha: f64) -> Self {
        GaussianMixture {
            dim: self.dim,
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.iter().map(|m| alpha.sqrt() * m).collect(),
                    std: (alpha * c.std * c.std + 1.0 - alpha).sqrt(),
                })
                .collect(),
        }
    }

    /// `E[x0 | x_t]` in closed form, plus what the Jacobian needs.
    fn posterior(&self, x: &[f64], alpha: f64) -> Posterior {
        let ra = alpha.sqrt();
        let d = self.dim as f64;
        let mut logits = Vec::with_capacity(self.components.len());
        let mut slopes = Vec::with_capacity(self.components.len());
        let mut gains = Vec::with_capacity(self.components.len());
        let mut cond_means = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s2 = c.std * c.std;
            let v = alpha * s2 + 1.0 - alpha;
            let resid: Vec<f64> = x.iter().zip(&c.mean).map(|(xi, mi)| xi - ra * mi).collect();
            let sq: f64 = resid.iter().map(|r| r * r).sum();
            logits.push(c.weight.ln() - 0.5 * sq / v - 0.5 * d * v.ln());
            let gain = ra * s2 / v;
            cond_means.push(c.mean.iter().zip(&resid).map(|(m, r)| m + gain * r).collect::<Vec<_>>());
            slopes.push(resid.iter().map(|r| -r / v).collect::<Vec<_>>());
            gains.push(gain);
        }
        let resp = softmax(&logits);
        let mut mean = vec![0.0; self.dim];
        for (rk, mk) in resp.iter().zip(&cond_means) {
            for (o, v) in mean.iter_mut().zip(mk) {
                *o += rk * v;
            }
        }
        Posterior {
            resp,
            slopes,
            gains,
            cond_means,
            mean,
        }
    }

    pub fn posterior_mean(&self, x_t: &[f64], alpha: f64) -> Result<Vec<f64>> {
        self.check_dim(x_t)?;
        Ok(self.posterior(x_t, alpha).mean)
    }
}

struct Posterior {
    resp: Vec<f64>,
    slopes: Vec<Vec<f64>>,
    gains: Vec<f64>,
    cond_means: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl Posterior {
    /// `J^T g` where `J = d E[x0|x_t] / d x_t`.
    fn vjp(&self, g: &[f64]) -> Vec<f64> {
        let dim = g.len();
        let mut abar = vec![0.0; dim];
        for (rk, ak) in self.resp.iter().zip(&self.slopes) {
            for (o, a) in abar.iter_mut().zip(ak) {
                *o += rk * a;
            }
        }
        let mut out = vec![0.0; dim];
        for k in 0..self.resp.len() {
            let rk = self.resp[k];
            let mg: f64 = self.cond_means[k].iter().zip(g).map(|(m, gi)| m * gi).sum();
            for i in 0..dim {
                out[i] += rk * self.gains[k] * g[i] + rk * (self.slopes[k][i] - abar[i]) * mg;
            }
        }
        out
    }
}

/// Noise prediction of the ideal denoiser for a single flattened sample.
pub fn gmm_posterior_mean_denoiser(
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    mixture: &GaussianMixture,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Timestep { t, max: schedule.steps() });
    }
    let a = schedule.alpha_cum(t)?;
    let e = mixture.posterior_mean(x_t, a)?;
    let (ra, rn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_t.iter().zip(&e).map(|(x, m)| (x - ra * m) / rn).collect())
}

/// The ideal denoiser for a segment distribution given as a mixture over
/// flattened `[L*D]` segments.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    pub mixture: GaussianMixture,
}

impl GmmDenoiser {
    pub fn new(mixture: GaussianMixture) -> Self {
        GmmDenoiser { mixture }
    }
}

struct GmmEpsOp {
    mixture: GaussianMixture,
    alpha: f64,
}

impl CustomOp for GmmEpsOp {
    fn name(&self) -> &'static str {
        "gmm_denoiser"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let w = x.cols();
        let (ra, rn) = (self.alpha.sqrt(), (1.0 - self.alpha).sqrt());
        let mut out = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let post = self.mixture.posterior(x.row(r), self.alpha);
            let g = grad_out.row(r);
            let jt = post.vjp(g);
            out.extend(g.iter().zip(&jt).map(|(gi, ji)| (gi - ra * ji) / rn));
        }
        debug_assert_eq!(out.len(), x.rows() * w);
        Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
    }
}

impl Denoiser for GmmDenoiser {
    fn segment_width(&self) -> usize {
        self.mixture.dim()
    }

    fn predict(&self, segments: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        if segments.cols() != self.mixture.dim() {
            return Err(Error::Config(format!(
                "mixture has dimension {}, segments have width {}",
                self.mixture.dim(),
                segments.cols()
            )));
        }
        let mut out = Vec::with_capacity(segments.len());
        for r in 0..segments.rows() {
            out.extend(gmm_posterior_mean_denoiser(segments.row(r), t, schedule, &self.mixture)?);
        }
        let out = Tensor::new(segments.shape().to_vec(), out)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "gmm_denoiser" });
        }
        Ok(out)
    }

    fn record(&self, tape: &mut Tape, segments: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
        let value = self.predict(tape.value(segments), t, schedule)?;
        let op = GmmEpsOp {
            mixture: self.mixture.clone(),
            alpha: schedule.alpha_cum(t)?,
        };
        tape.custom(&[segments], value, Box::new(op))
    }
}

/// Log-density of a plan under the chain (Bethe) composition of a segment
/// mixture: sum of segment log-densities minus the log-marginal of every
/// shared block, which is counted twice by the segments.
pub fn composed_logpdf(plan: &[f64], layout: &SegmentLayout, mixture: &GaussianMixture) -> Result<f64> {
    if plan.len() != layout.plan_width() {
        return Err(Error::shape("composed_logpdf", &[layout.plan_width()], &[plan.len()]));
    }
    if mixture.dim() != layout.segment_width() {
        return Err(Error::Config("mixture dimension must equal L*D".into()));
    }
    let d = layout.dim;
    let sw = layout.segment_width();
    let mut total = 0.0;
    for j in 0..layout.segments {
        let start = layout.global_index(j, 0) * d;
        total += mixture.logpdf(&plan[start..start + sw])?;
    }
    if layout.segments > 1 {
        let head: Vec<usize> = (0..layout.overlap * d).collect();
        let shared = mixture.marginal(&head)?;
        for j in 1..layout.segments {
            let start = layout.global_index(j, 0) * d;
            total -= shared.logpdf(&plan[start..start + layout.overlap * d])?;
        }
    }
    Ok(total)
}

/// Adaptive trapezoid rule: halves the step until successive estimates agree
/// to `tol` (relative), starting from 1024 panels.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let mut n = 1024usize;
    let mut h = (b - a) / n as f64;
    let mut sum = 0.5 * (f(a) + f(b)) + (1..n).map(|i| f(a + i as f64 * h)).sum::<f64>();
    let mut est = sum * h;
    for _ in 0..20 {
        let mids: f64 = (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum();
        sum += mids;
        n *= 2;
        h *= 0.5;
        let next = sum * h;
        if (next - est).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return next;
        }
        est = next;
    }
    est
}
