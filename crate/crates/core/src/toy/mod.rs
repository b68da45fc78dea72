//! Toy environments: the bimodal chain and a corridor maze, with their
//! dataset generators and validity checks.

pub mod bimodal;
pub mod maze;

pub use bimodal::{check_valid_bimodal, check_valid_bimodal_with, gen_bimodal_segments, BimodalToySpec};
pub use maze::{check_valid_maze, gen_corridor_maze_dataset, CorridorMaze, MazeDatasetSpec};

use crate::error::{Error, Result};
use crate::sampler::PlanBatch;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fraction of plans accepted by `check`; failed chains count as invalid.
pub fn valid_rate(batch: &PlanBatch, check: impl Fn(&[f64]) -> bool) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let ok = (0..batch.len()).filter(|&i| !batch.failed[i] && check(batch.plan(i))).count();
    ok as f64 / batch.len() as f64
}

/// Validity flags, in plan order.
pub fn validity(batch: &PlanBatch, check: impl Fn(&[f64]) -> bool) -> Vec<bool> {
    (0..batch.len()).map(|i| !batch.failed[i] && check(batch.plan(i))).collect()
}

/// A segment dataset with a free-form header describing how it was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDataset {
    pub header: serde_json::Value,
    pub segment_length: usize,
    pub dim: usize,
    pub segments: Vec<Vec<f64>>,
}

impl SegmentDataset {
    pub fn new(header: serde_json::Value, segment_length: usize, dim: usize, data: &Tensor) -> Result<Self> {
        if data.cols() != segment_length * dim {
            return Err(Error::shape("dataset", &[data.rows(), segment_length * dim], data.shape()));
        }
        Ok(SegmentDataset {
            header,
            segment_length,
            dim,
            segments: (0..data.rows()).map(|r| data.row(r).to_vec()).collect(),
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let w = self.segment_length * self.dim;
        if self.segments.iter().any(|s| s.len() != w) {
            return Err(Error::Format {
                what: "dataset",
                msg: format!("every segment must have {w} values"),
            });
        }
        Tensor::new(vec![self.segments.len(), w], self.segments.concat())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::SegmentLayout;

    fn batch(flags: &[bool]) -> PlanBatch {
        let n = flags.len();
        let plans = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        PlanBatch {
            layout: SegmentLayout::new(1, 2, 1, 1).unwrap(),
            plans: Tensor::new(vec![n, 1, 1], plans).unwrap(),
            base_seed: 0,
            chain_indices: (0..n as u64).collect(),
            failed: vec![false; n],
            diagnostics: None,
        }
    }

    #[test]
    fn rates() {
        let ok = |p: &[f64]| p[0] == 1.0;
        assert_eq!(valid_rate(&batch(&[true, true]), ok), 1.0);
        assert_eq!(valid_rate(&batch(&[false, false]), ok), 0.0);
        assert_eq!(valid_rate(&batch(&[true, true, false, true]), ok), 0.75);
        let mut b = batch(&[true, true]);
        b.failed[1] = true;
        assert_eq!(valid_rate(&b, ok), 0.5);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 1.1, 0.9, -1.0, 0.0]).unwrap();
        let d = SegmentDataset::new(serde_json::json!({"env": "bimodal"}), 3, 1, &t).unwrap();
        let p = dir.path().join("d.json");
        d.save(&p).unwrap();
        let back = SegmentDataset::load(&p).unwrap();
        assert_eq!(back.to_tensor().unwrap(), t);
    }
}
