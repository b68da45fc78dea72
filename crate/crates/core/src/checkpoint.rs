//! JSON checkpoints for [`MlpDenoiser`] plus the schedule it was trained with.
//!
//! Floats are written in shortest round-trip decimal form and parsed with
//! exact rounding, so save/load is value-exact.

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpDenoiser};
use crate::schedule::{NoiseSchedule, ScheduleDescriptor};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub schedule: ScheduleDescriptor,
    /// `W1, b1, W2, b2, ...`, each flattened row-major.
    pub weights: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &MlpDenoiser, schedule: &NoiseSchedule) -> Result<Self> {
        let schedule = schedule
            .descriptor()
            .ok_or_else(|| Error::Config("only parametric schedules can be checkpointed".into()))?;
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            layer_dims: model.layer_dims().to_vec(),
            time_embed_dim: model.time_embed_dim(),
            activation: model.activation(),
            schedule,
            weights: model.params().iter().map(|p| p.data().to_vec()).collect(),
        })
    }

    pub fn into_parts(self) -> Result<(MlpDenoiser, NoiseSchedule)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                msg: format!("unsupported format_version {}", self.format_version),
            });
        }
        let schedule = NoiseSchedule::from_descriptor(&self.schedule)?;
        let params = self.weights.into_iter().map(Tensor::from_vec).collect();
        let model = MlpDenoiser::from_parts(self.layer_dims, self.time_embed_dim, self.activation, params)?;
        Ok((model, schedule))
    }
}

pub fn to_string(model: &MlpDenoiser, schedule: &NoiseSchedule) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Checkpoint::from_model(model, schedule)?)?)
}

pub fn from_str(s: &str) -> Result<(MlpDenoiser, NoiseSchedule)> {
    let ck: Checkpoint = serde_json::from_str(s)?;
    ck.into_parts()
}

pub fn save(path: &Path, model: &MlpDenoiser, schedule: &NoiseSchedule) -> Result<()> {
    std::fs::write(path, to_string(model, schedule)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(MlpDenoiser, NoiseSchedule)> {
    from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::random_small_mlp;
    use crate::rng::{stream, Purpose};

    #[test]
    fn round_trip_is_value_exact() {
        let mut r = stream(9, 0, Purpose::Aux);
        let m = random_small_mlp(3, &[7, 5], 4, &mut r);
        let s = NoiseSchedule::linear(256, 1e-4, 0.04).unwrap();
        let text = to_string(&m, &s).unwrap();
        let (m2, s2) = from_str(&text).unwrap();
        assert_eq!(m, m2);
        assert_eq!(s, s2);
        for (a, b) in m.params().iter().zip(m2.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_unknown_version_and_bad_shapes() {
        let mut r = stream(9, 1, Purpose::Aux);
        let m = random_small_mlp(2, &[3], 2, &mut r);
        let s = NoiseSchedule::linear(8, 1e-3, 0.1).unwrap();
        let mut ck = Checkpoint::from_model(&m, &s).unwrap();
        ck.format_version = 99;
        assert!(ck.clone().into_parts().is_err());
        ck.format_version = FORMAT_VERSION;
        ck.weights[0].pop();
        assert!(ck.into_parts().is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut r = stream(9, 2, Purpose::Aux);
        let m = random_small_mlp(3, &[4], 2, &mut r);
        let s = NoiseSchedule::linear(16, 1e-3, 0.1).unwrap();
        save(&path, &m, &s).unwrap();
        let (m2, _) = load(&path).unwrap();
        assert_eq!(m, m2);
    }
}
