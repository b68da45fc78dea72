//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `base_seed`, with the 64-bit
//! ChaCha stream id derived from `(chain_index, purpose)`. Gaussian draws use
//! `rand_distr::StandardNormal`. Changing either crate version may change the
//! numbers, but within one build the streams are stable and independent of
//! how chains are batched.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for within one chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Initial noise, reverse-step noise and constraint re-noising.
    Chain = 0,
    /// Monte-Carlo noise of the self-reconstruction probe.
    Probe = 1,
    /// Evaluation-only draws (scoring finished plans).
    Eval = 2,
    /// Anything else: training, dataset generation.
    Aux = 3,
}

pub fn stream(base_seed: u64, chain_index: u64, purpose: Purpose) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(chain_index.wrapping_mul(4).wrapping_add(purpose as u64));
    rng
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).expect("shape product matches")
}

/// Per-chain generators for one plan.
#[derive(Debug, Clone)]
pub struct ChainStreams {
    pub chain: StreamRng,
    pub probe: StreamRng,
}

impl ChainStreams {
    pub fn new(base_seed: u64, chain_index: u64) -> Self {
        ChainStreams {
            chain: stream(base_seed, chain_index, Purpose::Chain),
            probe: stream(base_seed, chain_index, Purpose::Probe),
        }
    }
}
