//! Chain layout of overlapping segments and the overlap-averaging rule used
//! both for noise predictions and for per-segment clean estimates.
//!
//! Plans are stored flat: plan `b`, variable `i`, component `c` lives at
//! `b * N * D + i * D + c`. Segment `j` covers variables
//! `[j * (L - O), j * (L - O) + L)`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    #[serde(rename = "M")]
    pub segments: usize,
    #[serde(rename = "L")]
    pub length: usize,
    #[serde(rename = "O")]
    pub overlap: usize,
    #[serde(rename = "D")]
    pub dim: usize,
}

impl SegmentLayout {
    /// Requires `M >= 1`, `D >= 1` and `0 < O <= L / 2`, so that every
    /// variable is shared by at most two neighbouring segments.
    pub fn new(segments: usize, length: usize, overlap: usize, dim: usize) -> Result<Self> {
        if segments == 0 || dim == 0 {
            return Err(Error::Config(format!("need M >= 1 and D >= 1, got M={segments}, D={dim}")));
        }
        if overlap == 0 || 2 * overlap > length {
            return Err(Error::Config(format!(
                "need 0 < O <= L/2 for a chain layout, got L={length}, O={overlap}"
            )));
        }
        Ok(SegmentLayout {
            segments,
            length,
            overlap,
            dim,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.segments, self.length, self.overlap, self.dim).map(|_| ())
    }

    /// Number of variables `N = M*L - (M-1)*O`.
    pub fn horizon(&self) -> usize {
        self.segments * self.length - (self.segments - 1) * self.overlap
    }

    pub fn stride(&self) -> usize {
        self.length - self.overlap
    }

    pub fn segment_width(&self) -> usize {
        self.length * self.dim
    }

    pub fn plan_width(&self) -> usize {
        self.horizon() * self.dim
    }

    /// Global variable index of position `k` within segment `j`.
    pub fn global_index(&self, j: usize, k: usize) -> usize {
        j * self.stride() + k
    }

    pub fn segment_range(&self, j: usize) -> std::ops::Range<usize> {
        let s = j * self.stride();
        s..s + self.length
    }

    /// How many segments contain variable `i`.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.segments).filter(|&j| self.segment_range(j).contains(&i)).count()
    }

    pub fn batch_index(&self, batch: usize) -> BatchIndex {
        BatchIndex::new(*self, batch)
    }

    fn check_plan(&self, plan: &Tensor) -> Result<()> {
        if plan.len() != self.plan_width() {
            return Err(Error::shape("plan", &[self.horizon(), self.dim], plan.shape()));
        }
        Ok(())
    }
}

/// Precomputed flat index maps for a batch of `B` plans.
#[derive(Debug, Clone)]
pub struct BatchIndex {
    pub layout: SegmentLayout,
    pub batch: usize,
    /// Segment element -> plan element, in `[B*M, L*D]` order.
    pub gather: Arc<[usize]>,
    /// `1 / d_i` for each segment element.
    pub average_weight: Arc<[f64]>,
    /// Segment-tensor elements of the left side of each overlap, `[B, M-1, O*D]` order.
    pub overlap_left: Arc<[usize]>,
    /// Matching right-side elements.
    pub overlap_right: Arc<[usize]>,
}

impl BatchIndex {
    fn new(layout: SegmentLayout, batch: usize) -> Self {
        let (m, l, o, d) = (layout.segments, layout.length, layout.overlap, layout.dim);
        let pw = layout.plan_width();
        let sw = layout.segment_width();
        let deg: Vec<usize> = (0..layout.horizon()).map(|i| layout.degree(i)).collect();
        let mut gather = Vec::with_capacity(batch * m * sw);
        let mut weight = Vec::with_capacity(batch * m * sw);
        for b in 0..batch {
            for j in 0..m {
                for k in 0..l {
                    let i = layout.global_index(j, k);
                    for c in 0..d {
                        gather.push(b * pw + i * d + c);
                        weight.push(1.0 / deg[i] as f64);
                    }
                }
            }
        }
        let mut left = Vec::new();
        let mut right = Vec::new();
        for b in 0..batch {
            for j in 0..m.saturating_sub(1) {
                for q in 0..o {
                    for c in 0..d {
                        left.push((b * m + j) * sw + (l - o + q) * d + c);
                        right.push((b * m + j + 1) * sw + q * d + c);
                    }
                }
            }
        }
        BatchIndex {
            layout,
            batch,
            gather: gather.into(),
            average_weight: weight.into(),
            overlap_left: left.into(),
            overlap_right: right.into(),
        }
    }

    pub fn segments_shape(&self) -> [usize; 2] {
        [self.batch * self.layout.segments, self.layout.segment_width()]
    }

    pub fn plans_shape(&self) -> [usize; 2] {
        [self.batch, self.layout.plan_width()]
    }

    fn overlap_shape(&self) -> [usize; 1] {
        [self.overlap_left.len()]
    }

    /// `[B, N*D]` plans to `[B*M, L*D]` segments.
    pub fn extract(&self, plans: &Tensor) -> Result<Tensor> {
        self.check_plans(plans)?;
        plans.gather(&self.gather, &self.segments_shape())
    }

    /// `[B*M, L*D]` per-segment values to `[B, N*D]`, averaging shared variables.
    pub fn compose(&self, segments: &Tensor) -> Result<Tensor> {
        self.check_segments(segments)?;
        segments.scatter_add(&self.gather, &self.average_weight, &self.plans_shape())
    }

    pub fn record_extract(&self, tape: &mut Tape, plans: Var) -> Result<Var> {
        self.check_plans(tape.value(plans))?;
        tape.gather(plans, self.gather.clone(), &self.segments_shape())
    }

    pub fn record_compose(&self, tape: &mut Tape, segments: Var) -> Result<Var> {
        self.check_segments(tape.value(segments))?;
        tape.scatter_add(
            segments,
            self.gather.clone(),
            self.average_weight.clone(),
            &self.plans_shape(),
        )
    }

    /// Left-minus-right differences over every overlap, `[B * (M-1) * O * D]`.
    pub fn overlap_difference(&self, segments: &Tensor) -> Result<Tensor> {
        self.check_segments(segments)?;
        let a = segments.gather(&self.overlap_left, &self.overlap_shape())?;
        let b = segments.gather(&self.overlap_right, &self.overlap_shape())?;
        a.sub(&b)
    }

    pub fn record_overlap_difference(&self, tape: &mut Tape, segments: Var) -> Result<Var> {
        self.check_segments(tape.value(segments))?;
        let shape = self.overlap_shape();
        let a = tape.gather(segments, self.overlap_left.clone(), &shape)?;
        let b = tape.gather(segments, self.overlap_right.clone(), &shape)?;
        tape.sub(a, b)
    }

    /// Number of overlap entries per plan (`(M-1) * O * D`).
    pub fn overlap_width(&self) -> usize {
        (self.layout.segments - 1) * self.layout.overlap * self.layout.dim
    }

    fn check_plans(&self, plans: &Tensor) -> Result<()> {
        if plans.len() != self.batch * self.layout.plan_width() {
            return Err(Error::shape("plans", &self.plans_shape(), plans.shape()));
        }
        Ok(())
    }

    fn check_segments(&self, segs: &Tensor) -> Result<()> {
        if segs.len() != self.batch * self.layout.segments * self.layout.segment_width() {
            return Err(Error::shape("segments", &self.segments_shape(), segs.shape()));
        }
        Ok(())
    }
}

/// Splits one `[N, D]` plan into its `M` segments of shape `[L, D]`.
pub fn extract_segments(plan: &Tensor, layout: &SegmentLayout) -> Result<Vec<Tensor>> {
    layout.check_plan(plan)?;
    let (l, d) = (layout.length, layout.dim);
    (0..layout.segments)
        .map(|j| {
            let start = layout.global_index(j, 0) * d;
            Tensor::new(vec![l, d], plan.data()[start..start + l * d].to_vec())
        })
        .collect()
}

fn average_segments(per_segment: &[Tensor], layout: &SegmentLayout, op: &'static str) -> Result<Tensor> {
    if per_segment.len() != layout.segments {
        return Err(Error::shape(op, &[layout.segments], &[per_segment.len()]));
    }
    let sw = layout.segment_width();
    let mut flat = Vec::with_capacity(layout.segments * sw);
    for s in per_segment {
        if s.len() != sw {
            return Err(Error::shape(op, &[layout.length, layout.dim], s.shape()));
        }
        flat.extend_from_slice(s.data());
    }
    let segs = Tensor::new(vec![layout.segments, sw], flat)?;
    layout.batch_index(1).compose(&segs)?.reshape(&[layout.horizon(), layout.dim])
}

/// Global noise prediction: each variable gets the mean of the predictions of
/// the segments that contain it.
pub fn compose_epsilon(per_segment_eps: &[Tensor], layout: &SegmentLayout) -> Result<Tensor> {
    average_segments(per_segment_eps, layout, "compose_epsilon")
}

/// Same averaging rule applied to per-segment clean estimates.
pub fn merge_clean_estimates(per_segment_x0: &[Tensor], layout: &SegmentLayout) -> Result<Tensor> {
    average_segments(per_segment_x0, layout, "merge_clean_estimates")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream, Purpose};

    #[test]
    fn horizon_and_degrees() {
        let lay = SegmentLayout::new(8, 3, 1, 1).unwrap();
        assert_eq!(lay.horizon(), 17);
        let deg: Vec<usize> = (0..17).map(|i| lay.degree(i)).collect();
        for (i, d) in deg.iter().enumerate() {
            let shared = i > 0 && i < 16 && i % 2 == 0;
            assert_eq!(*d, if shared { 2 } else { 1 });
        }
        let lay = SegmentLayout::new(3, 8, 2, 2).unwrap();
        assert_eq!(lay.horizon(), 20);
    }

    #[test]
    fn invalid_layouts() {
        assert!(SegmentLayout::new(0, 3, 1, 1).is_err());
        assert!(SegmentLayout::new(2, 3, 0, 1).is_err());
        assert!(SegmentLayout::new(2, 3, 2, 1).is_err());
        assert!(SegmentLayout::new(2, 3, 1, 0).is_err());
    }

    #[test]
    fn five_variable_split() {
        let lay = SegmentLayout::new(2, 3, 1, 1).unwrap();
        let plan = Tensor::new(vec![5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let segs = extract_segments(&plan, &lay).unwrap();
        assert_eq!(segs[0].data(), &[1.0, 2.0, 3.0]);
        assert_eq!(segs[1].data(), &[3.0, 4.0, 5.0]);
        assert!(extract_segments(&Tensor::zeros(&[4, 1]), &lay).is_err());
    }

    #[test]
    fn single_segment_is_whole_plan() {
        let lay = SegmentLayout::new(1, 4, 1, 2).unwrap();
        let plan = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
        let segs = extract_segments(&plan, &lay).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].data(), plan.data());
    }

    #[test]
    fn opposite_predictions_cancel() {
        let lay = SegmentLayout::new(2, 3, 1, 1).unwrap();
        let a = Tensor::from_vec(vec![0.5, 0.5, 1.0]);
        let b = Tensor::from_vec(vec![-1.0, 0.2, 0.2]);
        let c = compose_epsilon(&[a, b], &lay).unwrap();
        assert_eq!(c.data(), &[0.5, 0.5, 0.0, 0.2, 0.2]);
        let m = merge_clean_estimates(
            &[Tensor::from_vec(vec![0.0, 0.0, 0.4]), Tensor::from_vec(vec![0.8, 0.0, 0.0])],
            &lay,
        )
        .unwrap();
        assert!((m.data()[2] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn agreeing_segments_reproduce_the_plan() {
        let lay = SegmentLayout::new(4, 5, 2, 2).unwrap();
        let mut r = stream(0, 0, Purpose::Aux);
        let plan = normal_tensor(&mut r, &[lay.horizon(), 2]);
        let segs = extract_segments(&plan, &lay).unwrap();
        let back = merge_clean_estimates(&segs, &lay).unwrap();
        for (a, b) in back.data().iter().zip(plan.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Brute-force accounting: accumulate contributions and counts per global
    /// index directly from the segment ranges, then compare.
    #[test]
    fn composition_matches_brute_force_mean() {
        let lay = SegmentLayout::new(3, 4, 2, 2).unwrap();
        let mut r = stream(1, 0, Purpose::Aux);
        let preds: Vec<Tensor> = (0..3).map(|_| normal_tensor(&mut r, &[4, 2])).collect();
        let n = lay.horizon();
        let mut sum = vec![0.0; n * 2];
        let mut count = vec![0usize; n];
        for (j, p) in preds.iter().enumerate() {
            for k in 0..4 {
                let i = j * 2 + k;
                count[i] += 1;
                for c in 0..2 {
                    sum[i * 2 + c] += p.data()[k * 2 + c];
                }
            }
        }
        let c = compose_epsilon(&preds, &lay).unwrap();
        for i in 0..n {
            assert_eq!(count[i], lay.degree(i));
            assert!(count[i] == 1 || count[i] == 2);
            for ch in 0..2 {
                let want = sum[i * 2 + ch] / count[i] as f64;
                assert!((c.data()[i * 2 + ch] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn overlap_difference_pairs_shared_variables() {
        let lay = SegmentLayout::new(3, 3, 1, 1).unwrap();
        let idx = lay.batch_index(1);
        let segs = Tensor::new(vec![3, 3], vec![0.0, 0.0, 1.0, 3.0, 0.0, 5.0, 2.0, 0.0, 0.0]).unwrap();
        let d = idx.overlap_difference(&segs).unwrap();
        assert_eq!(d.data(), &[-2.0, 3.0]);
    }

    #[test]
    fn layout_serializes_with_upper_case_keys() {
        let lay = SegmentLayout::new(8, 3, 1, 1).unwrap();
        let s = serde_json::to_string(&lay).unwrap();
        assert_eq!(s, r#"{"M":8,"L":3,"O":1,"D":1}"#);
    }
}
