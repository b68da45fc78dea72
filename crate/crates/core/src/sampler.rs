//! Batched ancestral sampling of composed plans, with or without guidance.
//!
//! Every plan owns two random streams derived from `(base_seed, chain_index)`:
//! the chain stream supplies the initial noise, the reverse-step noise and the
//! re-noised endpoint values, in that order at each step; the probe stream
//! supplies the Monte-Carlo noise of the guidance objective. Because the
//! guidance never touches the chain stream, a guided run with `w = 0` is
//! bit-identical to an unguided run with the same seeds, and results do not
//! depend on how plans are grouped into chunks.

use crate::composition::{BatchIndex, SegmentLayout};
use crate::denoiser::Denoiser;
use crate::diffusion::reverse_mean;
use crate::error::{Error, Result};
use crate::guidance::{guidance_batch, GuidanceConfig};
use crate::rng::{normal, ChainStreams};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Hard endpoint values. The start is written into the first plan variable
/// and the goal, when present, into the last one, each noised to the
/// current level after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConstraint {
    pub start: Vec<f64>,
    #[serde(default)]
    pub goal: Option<Vec<f64>>,
}

impl EndpointConstraint {
    pub fn new(start: Vec<f64>, goal: Option<Vec<f64>>) -> Self {
        EndpointConstraint { start, goal }
    }

    pub fn validate(&self, layout: &SegmentLayout) -> Result<()> {
        let ok = self.start.len() == layout.dim && self.goal.as_ref().is_none_or(|g| g.len() == layout.dim);
        if !ok {
            return Err(Error::Config(format!("endpoint constraint must have dimension D = {}", layout.dim)));
        }
        Ok(())
    }

    /// Writes the endpoints into `plan` (flat `[N*D]`) at level `t`, drawing
    /// fresh noise from `rng` when `t > 0`.
    fn apply<R: rand::Rng + ?Sized>(
        &self,
        plan: &mut [f64],
        t: usize,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<()> {
        let a = schedule.alpha_cum(t)?;
        let (ra, rn) = (a.sqrt(), (1.0 - a).sqrt());
        let d = self.start.len();
        let n = plan.len();
        let mut put = |dst: &mut [f64], src: &[f64]| {
            for (x, v) in dst.iter_mut().zip(src) {
                *x = if t == 0 { *v } else { ra * v + rn * normal(rng) };
            }
        };
        put(&mut plan[..d], &self.start);
        if let Some(g) = &self.goal {
            put(&mut plan[n - d..], g);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub num_plans: usize,
    pub base_seed: u64,
    /// Chain index of the first plan; plan `i` uses chain `first_chain + i`.
    pub first_chain: u64,
    pub record_diagnostics: bool,
    /// Plans advanced together through one batched model call.
    pub chunk_size: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            num_plans: 1,
            base_seed: 0,
            first_chain: 0,
            record_diagnostics: false,
            chunk_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub e_recon: f64,
    pub e_ov: f64,
    pub grad_max_abs: f64,
}

#[derive(Debug, Clone)]
pub struct PlanBatch {
    pub layout: SegmentLayout,
    /// `[B, N, D]`; rows of failed plans are NaN.
    pub plans: Tensor,
    pub base_seed: u64,
    pub chain_indices: Vec<u64>,
    pub failed: Vec<bool>,
    /// Per plan, one record per step from `T` down to 1.
    pub diagnostics: Option<Vec<Vec<StepRecord>>>,
}

impl PlanBatch {
    pub fn len(&self) -> usize {
        self.failed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.failed.is_empty()
    }

    /// Flat `[N*D]` view of plan `i`.
    pub fn plan(&self, i: usize) -> &[f64] {
        self.plans.row(i)
    }

    pub fn plan_tensor(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.layout.horizon(), self.layout.dim], self.plan(i).to_vec()).expect("plan width")
    }

    pub fn num_failed(&self) -> usize {
        self.failed.iter().filter(|f| **f).count()
    }
}

struct ChunkOutput {
    plans: Vec<f64>,
    diagnostics: Vec<Vec<StepRecord>>,
}

struct Job<'a> {
    layout: SegmentLayout,
    model: &'a dyn Denoiser,
    schedule: &'a NoiseSchedule,
    guidance: Option<GuidanceConfig>,
    constraint: Option<&'a EndpointConstraint>,
    diagnostics: bool,
}

impl Job<'_> {
    /// Runs the full reverse chain for the given chain indices together.
    fn run(&self, base_seed: u64, chains: &[u64]) -> Result<ChunkOutput> {
        let b = chains.len();
        let pw = self.layout.plan_width();
        let index = self.layout.batch_index(b);
        let steps = self.schedule.steps();
        let mut streams: Vec<ChainStreams> = chains.iter().map(|&c| ChainStreams::new(base_seed, c)).collect();
        let mut x = Vec::with_capacity(b * pw);
        for st in streams.iter_mut() {
            let start = x.len();
            x.extend((0..pw).map(|_| normal(&mut st.chain)));
            if let Some(c) = self.constraint {
                c.apply(&mut x[start..], steps, self.schedule, &mut st.chain)?;
            }
        }
        let mut x = Tensor::new(vec![b, pw], x)?;
        let mut diag = vec![Vec::new(); if self.diagnostics { b } else { 0 }];
        for t in (1..=steps).rev() {
            x = self.step(&x, t, &index, &mut streams, &mut diag)?;
        }
        Ok(ChunkOutput {
            plans: x.into_data(),
            diagnostics: diag,
        })
    }

    fn step(
        &self,
        x: &Tensor,
        t: usize,
        index: &BatchIndex,
        streams: &mut [ChainStreams],
        diag: &mut [Vec<StepRecord>],
    ) -> Result<Tensor> {
        let pw = self.layout.plan_width();
        let sigma = self.schedule.sigma(t)?;
        let guided = self
            .guidance
            .filter(|g| (g.w > 0.0 && sigma > 0.0) || self.diagnostics);
        let (eps_bar, correction) = match guided {
            Some(cfg) => {
                let mut eps = Vec::with_capacity(x.len());
                for st in streams.iter_mut() {
                    eps.extend((0..pw).map(|_| normal(&mut st.probe)));
                }
                let eps = Tensor::new(x.shape().to_vec(), eps)?;
                let out = guidance_batch(x, t, &eps, self.model, index, self.schedule, &cfg)?;
                for (i, rec) in diag.iter_mut().enumerate() {
                    rec.push(StepRecord {
                        t,
                        e_recon: out.e_recon[i],
                        e_ov: out.e_ov[i],
                        grad_max_abs: max_abs(out.grad.row(i)),
                    });
                }
                let corr = (cfg.w > 0.0 && sigma > 0.0).then(|| (out.grad, cfg.w * sigma * sigma, cfg.delta));
                (out.eps_bar, corr)
            }
            None => {
                let seg = index.extract(x)?;
                let pred = self.model.predict(&seg, t, self.schedule)?;
                (index.compose(&pred)?, None)
            }
        };
        let mut next = reverse_mean(&eps_bar, x, t, self.schedule)?;
        for (i, st) in streams.iter_mut().enumerate() {
            let row = next.row_mut(i);
            if sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += sigma * normal(&mut st.chain);
                }
            }
            if let Some((g, scale, delta)) = &correction {
                let g = g.row(i);
                let m = max_abs(g);
                for (v, gi) in row.iter_mut().zip(g) {
                    *v -= scale * (gi / (m + delta));
                }
            }
            if let Some(c) = self.constraint {
                c.apply(row, t - 1, self.schedule, &mut st.chain)?;
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite { op: "reverse_step" });
        }
        Ok(next)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn sample(job: &Job<'_>, opts: &SampleOptions) -> Result<PlanBatch> {
    job.layout.validate()?;
    if job.model.segment_width() != job.layout.segment_width() {
        return Err(Error::Config(format!(
            "denoiser expects segments of width {}, layout has L*D = {}",
            job.model.segment_width(),
            job.layout.segment_width()
        )));
    }
    if let Some(c) = job.constraint {
        c.validate(&job.layout)?;
    }
    if let Some(g) = &job.guidance {
        g.validate()?;
    }
    if opts.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be positive".into()));
    }
    let pw = job.layout.plan_width();
    let chains: Vec<u64> = (0..opts.num_plans as u64).map(|i| opts.first_chain + i).collect();
    let results: Vec<Result<(Vec<f64>, Vec<bool>, Vec<Vec<StepRecord>>)>> = chains
        .par_chunks(opts.chunk_size)
        .map(|chunk| match job.run(opts.base_seed, chunk) {
            Ok(out) => Ok((out.plans, vec![false; chunk.len()], out.diagnostics)),
            Err(Error::NonFinite { .. }) => {
                // isolate the offending chains; the others are recomputed alone
                // and come out identical because their streams are their own
                let mut plans = Vec::with_capacity(chunk.len() * pw);
                let mut failed = Vec::with_capacity(chunk.len());
                let mut diag = Vec::new();
                for &c in chunk {
                    match job.run(opts.base_seed, &[c]) {
                        Ok(out) => {
                            plans.extend(out.plans);
                            failed.push(false);
                            diag.extend(out.diagnostics);
                        }
                        Err(Error::NonFinite { .. }) => {
                            plans.extend(std::iter::repeat_n(f64::NAN, pw));
                            failed.push(true);
                            if job.diagnostics {
                                diag.push(Vec::new());
                            }
                        }
                        Err(e) => return Err(e),
                    }
                }
                Ok((plans, failed, diag))
            }
            Err(e) => Err(e),
        })
        .collect();
    let mut plans = Vec::with_capacity(opts.num_plans * pw);
    let mut failed = Vec::with_capacity(opts.num_plans);
    let mut diagnostics = Vec::new();
    for r in results {
        let (p, f, d) = r?;
        plans.extend(p);
        failed.extend(f);
        diagnostics.extend(d);
    }
    Ok(PlanBatch {
        layout: job.layout,
        plans: Tensor::new(vec![opts.num_plans, job.layout.horizon(), job.layout.dim], plans)?,
        base_seed: opts.base_seed,
        chain_indices: chains,
        failed,
        diagnostics: job.diagnostics.then_some(diagnostics),
    })
}

/// Guided composed sampling.
pub fn sample_rcd(
    layout: &SegmentLayout,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    constraint: Option<&EndpointConstraint>,
    opts: &SampleOptions,
) -> Result<PlanBatch> {
    let job = Job {
        layout: *layout,
        model,
        schedule,
        guidance: Some(*config),
        constraint,
        diagnostics: opts.record_diagnostics,
    };
    sample(&job, opts)
}

/// Plain composed sampling: the overlap-averaged noise prediction drives an
/// ordinary ancestral sampler.
pub fn sample_unguided(
    layout: &SegmentLayout,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    constraint: Option<&EndpointConstraint>,
    opts: &SampleOptions,
) -> Result<PlanBatch> {
    let job = Job {
        layout: *layout,
        model,
        schedule,
        guidance: None,
        constraint,
        diagnostics: false,
    };
    sample(&job, opts)
}

/// One guided reverse step on a single plan `[N, D]`, drawing from the
/// plan's own streams. With `w = 0` the guidance is not evaluated at all.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    x_t: &Tensor,
    t: usize,
    model: &dyn Denoiser,
    layout: &SegmentLayout,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    constraint: Option<&EndpointConstraint>,
    streams: &mut ChainStreams,
) -> Result<Tensor> {
    config.validate()?;
    if t == 0 || t > schedule.steps() {
        return Err(Error::Timestep { t, max: schedule.steps() });
    }
    if let Some(c) = constraint {
        c.validate(layout)?;
    }
    let job = Job {
        layout: *layout,
        model,
        schedule,
        guidance: Some(*config),
        constraint,
        diagnostics: false,
    };
    let x = x_t.clone().reshape(&[1, layout.plan_width()])?;
    let out = job.step(&x, t, &layout.batch_index(1), std::slice::from_mut(streams), &mut [])?;
    out.reshape(x_t.shape())
}
