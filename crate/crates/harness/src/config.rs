//! Experiment configuration: one JSON file, with command-line overrides
//! applied on top.

use crate::error::{HarnessError, Result};
use rcd_core::sampler::SampleOptions;
use rcd_core::toy::{BimodalToySpec, CorridorMaze, MazeDatasetSpec};
use rcd_core::train::TrainConfig;
use rcd_core::{Activation, GuidanceConfig, NoiseSchedule, SegmentLayout};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Environment {
    Bimodal {
        #[serde(default = "one")]
        mode_offset: f64,
        #[serde(default = "tenth")]
        mode_std: f64,
        #[serde(default)]
        start: f64,
        #[serde(default)]
        goal: f64,
        /// Segments per generated training trajectory.
        #[serde(default = "eight")]
        trajectory_segments: usize,
        /// Require every interior variable of a valid plan to sit at the
        /// same mode; when false each variable only has to be near one.
        #[serde(default = "yes")]
        coherent: bool,
    },
    Maze {
        /// Text grid file; the built-in two-corridor ring when absent.
        #[serde(default)]
        maze_file: Option<PathBuf>,
        #[serde(default = "one")]
        cell_size: f64,
        #[serde(default = "three")]
        trajectory_segments: usize,
        #[serde(default = "step_min")]
        step_min: f64,
        #[serde(default = "step_max")]
        step_max: f64,
        #[serde(default = "jitter")]
        jitter: f64,
        /// Pin the last plan point to the goal cell centre as well as the
        /// first one to the start.
        #[serde(default = "yes")]
        constrain_goal: bool,
    },
}

fn one() -> f64 {
    1.0
}
fn tenth() -> f64 {
    0.1
}
fn three() -> usize {
    3
}
fn eight() -> usize {
    8
}
fn yes() -> bool {
    true
}
fn step_min() -> f64 {
    MazeDatasetSpec::default().step_min
}
fn step_max() -> f64 {
    MazeDatasetSpec::default().step_max
}
fn jitter() -> f64 {
    MazeDatasetSpec::default().jitter
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 256,
            beta_start: 1e-4,
            beta_end: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    /// Seed for the weight initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            activation: Activation::Silu,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub optimizer: TrainConfig,
    /// Number of segments in the generated training set.
    pub dataset_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: TrainConfig {
                steps: 3000,
                ..TrainConfig::default()
            },
            dataset_size: 20_000,
        }
    }
}

/// Where plans come from: a trained checkpoint, or (bimodal only) the exact
/// posterior-mean denoiser of the segment distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserSource {
    #[default]
    Checkpoint,
    ExactMixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub num_plans: usize,
    pub base_seed: u64,
    pub chunk_size: usize,
    pub record_diagnostics: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            num_plans: 200,
            base_seed: 0,
            chunk_size: 64,
            record_diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write elapsed seconds into results; when false the column is left
    /// empty so reruns produce identical files.
    pub record_wall_time: bool,
    /// Append to an existing results file instead of replacing it.
    pub append: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
            record_wall_time: true,
            append: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: Environment,
    pub layout: SegmentLayout,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub denoiser: DenoiserSource,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// The 1-D bimodal chain with `M = 8` segments of length 3.
    pub fn bimodal() -> Self {
        ExperimentConfig {
            environment: Environment::Bimodal {
                mode_offset: 1.0,
                mode_std: 0.1,
                start: 0.0,
                goal: 0.0,
                trajectory_segments: 8,
                coherent: true,
            },
            layout: SegmentLayout::new(8, 3, 1, 1).expect("valid layout"),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            guidance: GuidanceConfig::default(),
            sampling: SamplingConfig::default(),
            denoiser: DenoiserSource::Checkpoint,
            output: OutputConfig::default(),
        }
    }

    /// The two-corridor maze with `M = 6` segments of four 2-D points.
    pub fn maze() -> Self {
        ExperimentConfig {
            environment: Environment::Maze {
                maze_file: None,
                cell_size: 1.0,
                trajectory_segments: 3,
                step_min: step_min(),
                step_max: step_max(),
                jitter: jitter(),
                constrain_goal: true,
            },
            layout: SegmentLayout::new(6, 4, 1, 2).expect("valid layout"),
            training: TrainingConfig {
                optimizer: TrainConfig {
                    steps: 12_000,
                    ..TrainConfig::default()
                },
                dataset_size: 20_000,
            },
            ..Self::bimodal()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.schedule()?;
        self.guidance.validate()?;
        self.training.optimizer.validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(HarnessError::Config("model.hidden must list positive layer widths".into()));
        }
        if self.sampling.num_plans == 0 || self.sampling.chunk_size == 0 {
            return Err(HarnessError::Config("sampling needs num_plans > 0 and chunk_size > 0".into()));
        }
        match &self.environment {
            Environment::Bimodal { .. } => {
                if self.layout.dim != 1 {
                    return Err(HarnessError::Config(format!(
                        "the bimodal chain is 1-D, layout has D = {}",
                        self.layout.dim
                    )));
                }
                let spec = self.bimodal_spec()?;
                if spec.mode_std <= 0.0 {
                    return Err(HarnessError::Config("mode_std must be > 0".into()));
                }
            }
            Environment::Maze { maze_file, .. } => {
                if self.layout.dim != 2 {
                    return Err(HarnessError::Config(format!("maze plans are 2-D, layout has D = {}", self.layout.dim)));
                }
                if let Some(p) = maze_file {
                    if !p.exists() {
                        return Err(HarnessError::Config(format!("maze file {} does not exist", p.display())));
                    }
                }
                self.maze_dataset_spec()?.validate()?;
                if self.denoiser == DenoiserSource::ExactMixture {
                    return Err(HarnessError::Config("the exact mixture denoiser is only defined for the bimodal chain".into()));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)?)
    }

    pub fn bimodal_spec(&self) -> Result<BimodalToySpec> {
        match self.environment {
            Environment::Bimodal {
                mode_offset,
                mode_std,
                start,
                goal,
                trajectory_segments,
                ..
            } => {
                let spec = BimodalToySpec {
                    mode_offset,
                    mode_std,
                    segment_length: self.layout.length,
                    overlap: self.layout.overlap,
                    start,
                    goal,
                    trajectory_segments,
                };
                spec.validate()?;
                Ok(spec)
            }
            Environment::Maze { .. } => Err(HarnessError::Config("environment is not bimodal".into())),
        }
    }

    pub fn corridor_maze(&self) -> Result<CorridorMaze> {
        match &self.environment {
            Environment::Maze { maze_file, cell_size, .. } => match maze_file {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                    Ok(CorridorMaze::parse(&text, *cell_size)?)
                }
                None => Ok(CorridorMaze::parse(rcd_core::toy::maze::TWO_CORRIDOR, *cell_size)?),
            },
            Environment::Bimodal { .. } => Err(HarnessError::Config("environment is not a maze".into())),
        }
    }

    pub fn maze_dataset_spec(&self) -> Result<MazeDatasetSpec> {
        match self.environment {
            Environment::Maze {
                trajectory_segments,
                step_min,
                step_max,
                jitter,
                ..
            } => Ok(MazeDatasetSpec {
                segment_length: self.layout.length,
                overlap: self.layout.overlap,
                trajectory_segments,
                step_min,
                step_max,
                jitter,
            }),
            Environment::Bimodal { .. } => Err(HarnessError::Config("environment is not a maze".into())),
        }
    }

    pub fn sample_options(&self, seed: u64) -> SampleOptions {
        SampleOptions {
            num_plans: self.sampling.num_plans,
            base_seed: seed,
            first_chain: 0,
            record_diagnostics: self.sampling.record_diagnostics,
            chunk_size: self.sampling.chunk_size,
        }
    }

    /// Same configuration with the layout resized to `segments`.
    pub fn with_segments(&self, segments: usize) -> Result<Self> {
        let mut c = self.clone();
        c.layout = SegmentLayout::new(segments, self.layout.length, self.layout.overlap, self.layout.dim)?;
        Ok(c)
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.output.dir.join("model.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [ExperimentConfig::bimodal(), ExperimentConfig::maze()] {
            cfg.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"environment": {"kind": "bimodal"}, "layout": {"M": 4, "L": 3, "O": 1, "D": 1}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.guidance, GuidanceConfig::default());
        assert_eq!(cfg.bimodal_spec().unwrap().mode_std, 0.1);
        assert_eq!(cfg.training.optimizer.steps, 3000);
    }

    #[test]
    fn rejects_inconsistent_layouts() {
        let mut cfg = ExperimentConfig::bimodal();
        cfg.layout.dim = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::bimodal();
        cfg.layout.overlap = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::maze();
        cfg.denoiser = DenoiserSource::ExactMixture;
        assert!(cfg.validate().is_err());
    }
}
