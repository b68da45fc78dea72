//! One-dimensional chains whose interior sits at either `+offset` or
//! `-offset`, anchored at fixed start and goal values.

use crate::composition::SegmentLayout;
use crate::error::{Error, Result};
use crate::gmm::{Component, GaussianMixture};
use crate::rng::normal;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BimodalToySpec {
    pub mode_offset: f64,
    pub mode_std: f64,
    pub segment_length: usize,
    pub overlap: usize,
    pub start: f64,
    pub goal: f64,
    /// Segments per training trajectory. The first segment of a trajectory
    /// is pinned to `start` and the last to `goal`.
    pub trajectory_segments: usize,
}

impl Default for BimodalToySpec {
    fn default() -> Self {
        BimodalToySpec {
            mode_offset: 1.0,
            mode_std: 0.1,
            segment_length: 3,
            overlap: 1,
            start: 0.0,
            goal: 0.0,
            trajectory_segments: 8,
        }
    }
}

impl BimodalToySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mode_std >= 0.0) || !self.mode_offset.is_finite() {
            return Err(Error::Config("mode_std must be >= 0 and mode_offset finite".into()));
        }
        if self.trajectory_segments == 0 {
            return Err(Error::Config("trajectory_segments must be positive".into()));
        }
        SegmentLayout::new(self.trajectory_segments, self.segment_length, self.overlap, 1)?;
        Ok(())
    }

    pub fn layout(&self, segments: usize) -> Result<SegmentLayout> {
        SegmentLayout::new(segments, self.segment_length, self.overlap, 1)
    }

    /// Default validity tolerance: three mode standard deviations.
    pub fn default_tolerance(&self) -> f64 {
        3.0 * self.mode_std
    }

    /// Segment distribution as a mixture: middle, start-pinned and
    /// goal-pinned segments for each mode, weighted by how often each kind
    /// appears in [`gen_bimodal_segments`] output.
    pub fn segment_mixture(&self) -> Result<GaussianMixture> {
        self.validate()?;
        if self.mode_std == 0.0 {
            return Err(Error::Config("segment mixture needs mode_std > 0".into()));
        }
        let l = self.segment_length;
        let m = self.trajectory_segments;
        let mut out = Vec::new();
        for sign in [1.0, -1.0] {
            let mode = sign * self.mode_offset;
            let kinds: Vec<(f64, Vec<f64>)> = if m == 1 {
                let mut v = vec![mode; l];
                v[0] = self.start;
                v[l - 1] = self.goal;
                vec![(1.0, v)]
            } else {
                let mut first = vec![mode; l];
                first[0] = self.start;
                let mut last = vec![mode; l];
                last[l - 1] = self.goal;
                let mut kinds = vec![(1.0, first), (1.0, last)];
                if m > 2 {
                    kinds.push(((m - 2) as f64, vec![mode; l]));
                }
                kinds
            };
            for (w, mean) in kinds {
                out.push(Component {
                    weight: 0.5 * w / m as f64,
                    mean,
                    std: self.mode_std,
                });
            }
        }
        GaussianMixture::new(out)
    }

    /// Two-component mixture of unanchored segments at `+offset` and `-offset`.
    pub fn interior_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::uniform(
            vec![vec![self.mode_offset; self.segment_length], vec![-self.mode_offset; self.segment_length]],
            self.mode_std,
        )
    }
}

/// `count` segments of shape `[L]`, rows of the returned `[count, L]` tensor.
///
/// Whole trajectories of `trajectory_segments` segments are generated (one
/// mode per trajectory, interior values `mode + mode_std * z`, endpoints
/// pinned to start and goal) and cut into overlapping segments; the last
/// trajectory is truncated to hit `count` exactly.
pub fn gen_bimodal_segments<R: Rng + ?Sized>(spec: &BimodalToySpec, count: usize, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let layout = spec.layout(spec.trajectory_segments)?;
    let n = layout.horizon();
    let l = spec.segment_length;
    let mut out = Vec::with_capacity(count * l);
    let mut made = 0;
    while made < count {
        let mode = if rng.random_bool(0.5) {
            spec.mode_offset
        } else {
            -spec.mode_offset
        };
        let mut traj: Vec<f64> = (0..n).map(|_| mode + spec.mode_std * normal(rng)).collect();
        traj[0] = spec.start;
        traj[n - 1] = spec.goal;
        for j in 0..layout.segments {
            if made == count {
                break;
            }
            out.extend_from_slice(&traj[layout.segment_range(j)]);
            made += 1;
        }
    }
    Tensor::new(vec![count, l], out)
}

/// Interior variables of a plan: everything except the first and the last.
fn interior(plan: &[f64]) -> &[f64] {
    if plan.len() <= 2 {
        &[]
    } else {
        &plan[1..plan.len() - 1]
    }
}

/// A plan is valid when every interior variable is within `tolerance` of
/// `+offset` or `-offset` and, if `require_coherence`, all of them are near
/// the same one.
pub fn check_valid_bimodal_with(plan: &[f64], spec: &BimodalToySpec, tolerance: f64, require_coherence: bool) -> bool {
    let near = |v: f64, m: f64| (v - m).abs() <= tolerance;
    let vars = interior(plan);
    if vars.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let all_near = |m: f64| vars.iter().all(|&v| near(v, m));
    if require_coherence {
        all_near(spec.mode_offset) || all_near(-spec.mode_offset)
    } else {
        vars.iter().all(|&v| near(v, spec.mode_offset) || near(v, -spec.mode_offset))
    }
}

/// Mode-coherent validity with an explicit tolerance.
pub fn check_valid_bimodal(plan: &[f64], spec: &BimodalToySpec, tolerance: f64) -> bool {
    check_valid_bimodal_with(plan, spec, tolerance, true)
}
