//! MLP noise-prediction network with a sinusoidal timestep embedding.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, t: &Tensor) -> Tensor {
        match self {
            Activation::Silu => t.map(crate::autodiff::silu),
            Activation::Tanh => t.map(f64::tanh),
        }
    }

    fn record(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Activation::Silu => tape.silu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

/// Highest angular frequency of the embedding, applied to `t / T`.
const MAX_FREQUENCY: f64 = 1000.0;

/// `[sin(w_k t/T)..., cos(w_k t/T)...]` with `w_k` geometric in `[1, 1000]`.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tau = t as f64 / steps as f64;
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            MAX_FREQUENCY.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut out: Vec<f64> = (0..half).map(|k| (freq(k) * tau).sin()).collect();
    out.extend((0..half).map(|k| (freq(k) * tau).cos()));
    out
}

/// Timesteps for a batch: one shared level, or one per row (training).
#[derive(Debug, Clone, Copy)]
pub enum Timesteps<'a> {
    Shared(usize),
    PerRow(&'a [usize]),
}

/// Fully connected `eps`-predictor: `[x, emb(t)] -> hidden... -> x`-shaped noise.
///
/// Weights are stored `[fan_in, fan_out]`, so a layer is `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    layer_dims: Vec<usize>,
    time_embed_dim: usize,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl MlpDenoiser {
    /// Randomly initialised network, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
    pub fn new<R: Rng + ?Sized>(
        data_width: usize,
        hidden: &[usize],
        time_embed_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut m = Self::zeros(data_width, hidden, time_embed_dim, activation)?;
        for (w, b) in m.weights.iter_mut().zip(m.biases.iter_mut()) {
            let bound = 1.0 / (w.rows() as f64).sqrt();
            for v in w.data_mut().iter_mut().chain(b.data_mut().iter_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(data_width: usize, hidden: &[usize], time_embed_dim: usize, activation: Activation) -> Result<Self> {
        if data_width == 0 || time_embed_dim == 0 || time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "need data width > 0 and an even time embedding width > 0, got {data_width}, {time_embed_dim}"
            )));
        }
        let mut dims = vec![data_width + time_embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(data_width);
        let weights = dims.windows(2).map(|w| Tensor::zeros(&[w[0], w[1]])).collect();
        let biases = dims.windows(2).map(|w| Tensor::zeros(&[w[1]])).collect();
        Ok(MlpDenoiser {
            layer_dims: dims,
            time_embed_dim,
            activation,
            weights,
            biases,
        })
    }

    /// Rebuilds a network from its dimensions and parameters in `W1, b1, W2, b2, ...` order.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        time_embed_dim: usize,
        activation: Activation,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        let data_width = *layer_dims.last().unwrap();
        let hidden = &layer_dims[1..layer_dims.len() - 1];
        let mut m = Self::zeros(data_width, hidden, time_embed_dim, activation)?;
        if m.layer_dims != layer_dims {
            return Err(Error::Config(format!(
                "input width {} must equal output width {} + time embedding {}",
                layer_dims[0], data_width, time_embed_dim
            )));
        }
        if params.len() != 2 * m.weights.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                2 * m.weights.len(),
                params.len()
            )));
        }
        for (slot, p) in m.params_mut().into_iter().zip(params) {
            if slot.len() != p.len() {
                return Err(Error::shape("from_parts", slot.shape(), p.shape()));
            }
            let shape = slot.shape().to_vec();
            *slot = p.reshape(&shape)?;
        }
        Ok(m)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Width of the data part of the input (and of the output).
    pub fn data_width(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn embedding(&self, times: Timesteps<'_>, rows: usize, steps: usize) -> Result<Tensor> {
        let e = self.time_embed_dim;
        match times {
            Timesteps::Shared(t) => Tensor::new(vec![1, e], time_embedding(t, steps, e)),
            Timesteps::PerRow(ts) => {
                if ts.len() != rows {
                    return Err(Error::shape("time embedding", &[rows], &[ts.len()]));
                }
                let data = ts.iter().flat_map(|&t| time_embedding(t, steps, e)).collect();
                Tensor::new(vec![rows, e], data)
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.data_width() {
            return Err(Error::Config(format!(
                "denoiser expects rows of width {}, got shape {:?}",
                self.data_width(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Eager forward pass on rows `[B, data_width]`.
    pub fn forward(&self, x: &Tensor, times: Timesteps<'_>, steps: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let emb = self.embedding(times, x.rows(), steps)?;
        let mut h = x.concat_cols(&emb)?;
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w)?.add_row(b)?;
            if i < last {
                h = self.activation.apply(&h);
            }
        }
        if !h.is_finite() {
            return Err(Error::NonFinite { op: "mlp_forward" });
        }
        Ok(h)
    }

    /// Records the forward pass using `params` (as returned by [`Self::param_vars`]).
    pub fn record_with(&self, tape: &mut Tape, params: &[Var], x: Var, times: Timesteps<'_>, steps: usize) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let rows = tape.value(x).rows();
        let emb = self.embedding(times, rows, steps)?;
        let emb = tape.constant(emb);
        let mut h = tape.concat_cols(x, emb)?;
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            h = tape.matmul(h, params[2 * i])?;
            h = tape.add_row(h, params[2 * i + 1])?;
            if i < last {
                h = self.activation.record(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Puts the parameters on `tape`, as leaves when `trainable`, else as constants.
    pub fn param_vars(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }
}

/// Predicted noise for one noisy segment of shape `[L, D]` (or any shape with
/// `L * D` entries); the result has the input's shape.
pub fn mlp_predict_noise(model: &MlpDenoiser, noisy_segment: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::Timestep { t, max: schedule.steps() });
    }
    if noisy_segment.len() != model.data_width() {
        return Err(Error::Config(format!(
            "segment has {} values, model expects {}",
            noisy_segment.len(),
            model.data_width()
        )));
    }
    let row = noisy_segment.clone().reshape(&[1, model.data_width()])?;
    let out = model.forward(&row, Timesteps::Shared(t), schedule.steps())?;
    out.reshape(noisy_segment.shape())
}

/// Same parameters drawn from a standard normal, for tests and checks.
pub fn random_small_mlp<R: Rng + ?Sized>(data_width: usize, hidden: &[usize], time_embed_dim: usize, rng: &mut R) -> MlpDenoiser {
    let mut m = MlpDenoiser::zeros(data_width, hidden, time_embed_dim, Activation::Silu).expect("valid dims");
    for p in m.params_mut() {
        let scale = 1.0 / (p.rows() as f64).sqrt();
        for v in p.data_mut() {
            *v = scale * rng::normal(rng);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn zero_model_predicts_zero() {
        let m = MlpDenoiser::zeros(3, &[8, 8], 4, Activation::Silu).unwrap();
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let y = mlp_predict_noise(&m, &Tensor::new(vec![3, 1], vec![0.3, -2.0, 5.0]).unwrap(), 4, &s).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(y.shape(), &[3, 1]);
    }

    #[test]
    fn shape_and_time_errors() {
        let m = MlpDenoiser::zeros(3, &[8], 4, Activation::Silu).unwrap();
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(mlp_predict_noise(&m, &x, 1, &s), Err(Error::Config(_))));
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(mlp_predict_noise(&m, &x, 0, &s), Err(Error::Timestep { .. })));
        assert!(matches!(mlp_predict_noise(&m, &x, 11, &s), Err(Error::Timestep { .. })));
    }

    /// One hidden layer of width 2, data width 1, embedding width 2, hand-set weights.
    #[test]
    fn hand_evaluated_two_layer_forward() {
        let w1 = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.25, 0.75, -0.5, 2.0]).unwrap();
        let b1 = Tensor::from_vec(vec![0.1, -0.2]);
        let w2 = Tensor::new(vec![2, 1], vec![1.5, -0.5]).unwrap();
        let b2 = Tensor::from_vec(vec![0.3]);
        let m = MlpDenoiser::from_parts(vec![3, 2, 1], 2, Activation::Tanh, vec![w1, b1, w2, b2]).unwrap();
        let s = NoiseSchedule::linear(4, 0.01, 0.2).unwrap();
        let t = 2;
        let y = mlp_predict_noise(&m, &Tensor::from_vec(vec![1.0]), t, &s).unwrap();

        // embedding with a single frequency of 1 at tau = 0.5
        let (es, ec) = (0.5f64.sin(), 0.5f64.cos());
        let h0 = (1.0 * 0.5 + es * 0.25 + ec * -0.5 + 0.1f64).tanh();
        let h1 = (1.0 * -1.0 + es * 0.75 + ec * 2.0 - 0.2f64).tanh();
        let want = 1.5 * h0 - 0.5 * h1 + 0.3;
        assert!((y.item() - want).abs() < 1e-14);
    }

    #[test]
    fn forward_is_pure_and_matches_recorded_pass() {
        let mut r = stream(2, 0, Purpose::Aux);
        let m = MlpDenoiser::new(6, &[16, 16], 8, Activation::Silu, &mut r).unwrap();
        let x = rng::normal_tensor(&mut r, &[5, 6]);
        let a = m.forward(&x, Timesteps::Shared(7), 20).unwrap();
        let b = m.forward(&x, Timesteps::Shared(7), 20).unwrap();
        assert_eq!(a, b);
        let mut tape = Tape::new();
        let p = m.param_vars(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = m.record_with(&mut tape, &p, xv, Timesteps::Shared(7), 20).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn from_parts_validates() {
        assert!(MlpDenoiser::from_parts(vec![5, 4, 2], 2, Activation::Silu, vec![]).is_err());
        assert!(MlpDenoiser::from_parts(vec![5, 4, 3], 2, Activation::Silu, vec![]).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = time_embedding(0, 10, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(time_embedding(3, 10, 32).len(), 32);
    }
}
