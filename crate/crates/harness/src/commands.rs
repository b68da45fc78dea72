//! The work behind each subcommand. Every function here is deterministic
//! given the configuration and seeds, apart from the optional timings.

use crate::config::{DenoiserSource, Environment, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::results::{write_results, ResultsRecord};
use rcd_core::checkpoint;
use rcd_core::gmm::{composed_logpdf, GaussianMixture};
use rcd_core::guidance::{overlap_consistency, self_recon_error};
use rcd_core::rng::{stream, Purpose};
use rcd_core::sampler::{sample_rcd, sample_unguided, StepRecord};
use rcd_core::toy::{
    check_valid_bimodal_with, check_valid_maze, gen_bimodal_segments, gen_corridor_maze_dataset, CorridorMaze,
    SegmentDataset,
};
use rcd_core::train::{smooth, train_denoiser};
use rcd_core::{Denoiser, EndpointConstraint, GmmDenoiser, GuidanceConfig, MlpDenoiser, NoiseSchedule, PlanBatch, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Unguided,
    Rcd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Unguided => "unguided",
            Method::Rcd => "rcd",
        })
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unguided" => Ok(Method::Unguided),
            "rcd" => Ok(Method::Rcd),
            other => Err(HarnessError::Usage(format!("unknown method '{other}', expected unguided or rcd"))),
        }
    }
}

/// Guidance knob varied by an ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    W,
    LambdaOv,
    ProbeRatio,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::W => "w",
            Axis::LambdaOv => "lambda_ov",
            Axis::ProbeRatio => "probe_ratio",
        }
    }

    pub fn apply(self, config: &GuidanceConfig, value: f64) -> GuidanceConfig {
        let mut c = *config;
        match self {
            Axis::W => c.w = value,
            Axis::LambdaOv => c.lambda_ov = value,
            Axis::ProbeRatio => c.probe_ratio = value,
        }
        c
    }
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" => Ok(Axis::W),
            "lambda_ov" => Ok(Axis::LambdaOv),
            "probe_ratio" => Ok(Axis::ProbeRatio),
            other => Err(HarnessError::Usage(format!(
                "unknown axis '{other}', expected w, lambda_ov or probe_ratio"
            ))),
        }
    }
}

/// A denoiser ready for sampling, with the schedule it belongs to.
pub enum LoadedModel {
    Mlp(MlpDenoiser),
    Exact(GmmDenoiser),
}

pub struct Planner {
    pub config: ExperimentConfig,
    pub model: LoadedModel,
    pub schedule: NoiseSchedule,
    env: EnvContext,
}

enum EnvContext {
    Bimodal {
        spec: rcd_core::toy::BimodalToySpec,
        density: GaussianMixture,
        coherent: bool,
    },
    Maze {
        maze: CorridorMaze,
        constrain_goal: bool,
    },
}

impl Planner {
    /// Builds the planner for `config`, reading `checkpoint` when the
    /// configuration asks for a trained model.
    pub fn new(config: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let env = match &config.environment {
            Environment::Bimodal { coherent, .. } => {
                let spec = config.bimodal_spec()?;
                EnvContext::Bimodal {
                    density: spec.segment_mixture()?,
                    spec,
                    coherent: *coherent,
                }
            }
            Environment::Maze { constrain_goal, .. } => EnvContext::Maze {
                maze: config.corridor_maze()?,
                constrain_goal: *constrain_goal,
            },
        };
        let (model, schedule) = match config.denoiser {
            DenoiserSource::ExactMixture => {
                let EnvContext::Bimodal { density, .. } = &env else {
                    return Err(HarnessError::Config("exact mixture needs the bimodal environment".into()));
                };
                (LoadedModel::Exact(GmmDenoiser::new(density.clone())), config.schedule()?)
            }
            DenoiserSource::Checkpoint => {
                let default = config.default_checkpoint();
                let path = checkpoint_path.unwrap_or(&default);
                if !path.exists() {
                    return Err(HarnessError::Config(format!(
                        "checkpoint {} does not exist; run `train` first or pass --checkpoint",
                        path.display()
                    )));
                }
                let (m, s) = checkpoint::load(path)?;
                if m.data_width() != config.layout.segment_width() {
                    return Err(HarnessError::Config(format!(
                        "checkpoint predicts segments of width {}, layout has L*D = {}",
                        m.data_width(),
                        config.layout.segment_width()
                    )));
                }
                (LoadedModel::Mlp(m), s)
            }
        };
        Ok(Planner {
            config: config.clone(),
            model,
            schedule,
            env,
        })
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        match &self.model {
            LoadedModel::Mlp(m) => m,
            LoadedModel::Exact(g) => g,
        }
    }

    pub fn constraint(&self) -> EndpointConstraint {
        match &self.env {
            EnvContext::Bimodal { spec, .. } => EndpointConstraint::new(vec![spec.start], Some(vec![spec.goal])),
            EnvContext::Maze { maze, constrain_goal } => {
                let (a, b) = maze.endpoints();
                EndpointConstraint::new(a.to_vec(), constrain_goal.then(|| b.to_vec()))
            }
        }
    }

    pub fn is_valid(&self, plan: &[f64]) -> bool {
        match &self.env {
            EnvContext::Bimodal { spec, coherent, .. } => {
                check_valid_bimodal_with(plan, spec, spec.default_tolerance(), *coherent)
            }
            EnvContext::Maze { maze, .. } => check_valid_maze(plan, maze),
        }
    }

    pub fn maze(&self) -> Option<&CorridorMaze> {
        match &self.env {
            EnvContext::Maze { maze, .. } => Some(maze),
            EnvContext::Bimodal { .. } => None,
        }
    }

    /// Composed log-density of a plan under the bimodal segment
    /// distribution; `None` for the maze.
    pub fn logp(&self, plan: &[f64]) -> Result<Option<f64>> {
        match &self.env {
            EnvContext::Bimodal { density, .. } => Ok(Some(composed_logpdf(plan, &self.config.layout, density)?)),
            EnvContext::Maze { .. } => Ok(None),
        }
    }

    /// Samples `num_plans` plans with `method` from base seed `seed`.
    pub fn sample(&self, method: Method, guidance: &GuidanceConfig, seed: u64) -> Result<PlanBatch> {
        let opts = self.config.sample_options(seed);
        let c = self.constraint();
        let batch = match method {
            Method::Unguided => sample_unguided(&self.config.layout, self.denoiser(), &self.schedule, Some(&c), &opts)?,
            Method::Rcd => sample_rcd(&self.config.layout, self.denoiser(), &self.schedule, guidance, Some(&c), &opts)?,
        };
        Ok(batch)
    }

    /// Validity and summary statistics of a finished batch. Reconstruction
    /// errors use the configured probe level and one evaluation draw per plan.
    pub fn evaluate(&self, batch: &PlanBatch) -> Result<Evaluation> {
        let layout = &self.config.layout;
        let s = self.config.guidance.probe_level(&self.schedule)?;
        let mut out = Evaluation::default();
        for i in 0..batch.len() {
            let plan = batch.plan(i);
            let ok = !batch.failed[i] && plan.iter().all(|v| v.is_finite());
            out.valid.push(ok && self.is_valid(plan));
            if !ok {
                out.logp.push(None);
                continue;
            }
            let x0 = Tensor::new(vec![layout.horizon(), layout.dim], plan.to_vec())?;
            let mut rng = stream(batch.base_seed, batch.chain_indices[i], Purpose::Eval);
            let rec = self_recon_error(&x0, self.denoiser(), layout, &self.schedule, s, &mut rng)?;
            out.e_recon.push(rec.e_recon);
            out.e_ov.push(overlap_consistency(&rec.per_segment, layout)?);
            out.logp.push(self.logp(plan)?);
        }
        Ok(out)
    }

    fn record(
        &self,
        method: Method,
        axis_name: &str,
        axis_value: f64,
        seed: u64,
        eval: &Evaluation,
        secs: f64,
    ) -> ResultsRecord {
        ResultsRecord {
            method: method.to_string(),
            axis_name: axis_name.to_string(),
            axis_value,
            seed,
            num_plans: eval.valid.len(),
            valid_rate: eval.valid_rate(),
            mean_e_recon: mean(&eval.e_recon),
            mean_e_ov: mean(&eval.e_ov),
            mean_logp: eval.mean_logp(),
            wall_secs: self.config.output.record_wall_time.then_some(secs),
        }
    }

    /// Samples and scores one `(method, guidance, seed)` cell.
    pub fn run_cell(
        &self,
        method: Method,
        guidance: &GuidanceConfig,
        seed: u64,
        axis_name: &str,
        axis_value: f64,
    ) -> Result<(ResultsRecord, PlanBatch, Evaluation)> {
        let t0 = Instant::now();
        let batch = self.sample(method, guidance, seed)?;
        let secs = t0.elapsed().as_secs_f64();
        let eval = self.evaluate(&batch)?;
        let rec = self.record(method, axis_name, axis_value, seed, &eval, secs);
        Ok((rec, batch, eval))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub valid: Vec<bool>,
    /// Over plans that finished without numerical failure.
    pub e_recon: Vec<f64>,
    pub e_ov: Vec<f64>,
    /// Per plan, `None` for failed plans or environments without a density.
    pub logp: Vec<Option<f64>>,
}

impl Evaluation {
    pub fn valid_rate(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    pub fn mean_logp(&self) -> Option<f64> {
        let v: Vec<f64> = self.logp.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| mean(&v))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_file: PathBuf,
    pub dataset_file: PathBuf,
    pub losses: Vec<f64>,
    pub secs: f64,
}

/// Generates the training set, trains the segment denoiser and writes the
/// checkpoint, a `<stem>.loss.csv` sidecar and the dataset next to it.
pub fn cmd_train(config: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let checkpoint = checkpoint_path.map_or_else(|| config.default_checkpoint(), Path::to_path_buf);
    let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        create_dir(&dir)?;
    }
    let t = &config.training;
    let seed = t.optimizer.seed;
    let mut data_rng = stream(seed, 1, Purpose::Aux);
    let (data, header) = match &config.environment {
        Environment::Bimodal { .. } => {
            let spec = config.bimodal_spec()?;
            let d = gen_bimodal_segments(&spec, t.dataset_size, &mut data_rng)?;
            (d, serde_json::json!({ "environment": "bimodal", "spec": spec, "seed": seed }))
        }
        Environment::Maze { .. } => {
            let maze = config.corridor_maze()?;
            let spec = config.maze_dataset_spec()?;
            let d = gen_corridor_maze_dataset(&maze, &spec, t.dataset_size, &mut data_rng)?;
            (d, serde_json::json!({ "environment": "maze", "spec": spec, "seed": seed }))
        }
    };
    let schedule = config.schedule()?;
    let m = &config.model;
    let mut model = MlpDenoiser::new(
        config.layout.segment_width(),
        &m.hidden,
        m.time_embed_dim,
        m.activation,
        &mut stream(m.init_seed, 0, Purpose::Aux),
    )?;
    let t0 = Instant::now();
    let losses = train_denoiser(&mut model, &data, &schedule, &t.optimizer)?;
    let secs = t0.elapsed().as_secs_f64();
    checkpoint::save(&checkpoint, &model, &schedule)?;

    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let loss_file = checkpoint.with_file_name(format!("{stem}.loss.csv"));
    let mut w = csv::Writer::from_path(&loss_file)?;
    w.write_record(["step", "loss", "smoothed"])?;
    let sm = smooth(&losses, 100);
    for (i, (l, s)) in losses.iter().zip(&sm).enumerate() {
        w.write_record([i.to_string(), l.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| HarnessError::io(&loss_file, e))?;

    let dataset_file = checkpoint.with_file_name(format!("{stem}.dataset.json"));
    SegmentDataset::new(header, config.layout.length, config.layout.dim, &data)?.save(&dataset_file)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_file,
        dataset_file,
        losses,
        secs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEntry {
    pub chain_index: u64,
    pub valid: bool,
    pub failed: bool,
    /// Flattened `[N, D]` plan.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub layout: rcd_core::SegmentLayout,
    pub guidance: Option<GuidanceConfig>,
    pub summary: ResultsRecord,
    pub plans: Vec<PlanEntry>,
    /// Per plan, one record per guided reverse step.
    pub diagnostics: Option<Vec<Vec<StepRecord>>>,
}

/// Samples one batch and writes `plans_<method>_seed<seed>.json` into `out`.
pub fn cmd_plan(planner: &Planner, method: Method, seed: u64, out: &Path) -> Result<(PathBuf, PlanFile)> {
    create_dir(out)?;
    let g = planner.config.guidance;
    let (summary, batch, eval) = planner.run_cell(method, &g, seed, "M", planner.config.layout.segments as f64)?;
    let plans = (0..batch.len())
        .map(|i| PlanEntry {
            chain_index: batch.chain_indices[i],
            valid: eval.valid[i],
            failed: batch.failed[i],
            values: batch.plan(i).to_vec(),
        })
        .collect();
    let file = PlanFile {
        schema_version: crate::results::SCHEMA_VERSION,
        method,
        seed,
        layout: batch.layout,
        guidance: (method == Method::Rcd).then_some(g),
        summary,
        plans,
        diagnostics: batch.diagnostics,
    };
    let path = out.join(format!("plans_{method}_seed{seed}.json"));
    write_json(&path, &file)?;
    Ok((path, file))
}

/// Both methods over every `M` in `segments` and every seed. Rows go to
/// `out/horizon.csv`.
pub fn cmd_sweep_horizon(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    segments: &[usize],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<ResultsRecord>> {
    if segments.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Usage("sweep-horizon needs at least one M and one seed".into()));
    }
    let mut rows = Vec::new();
    for &m in segments {
        let planner = Planner::new(&config.with_segments(m)?, checkpoint_path)?;
        for &seed in seeds {
            for method in [Method::Unguided, Method::Rcd] {
                let (rec, _, _) = planner.run_cell(method, &config.guidance, seed, "M", m as f64)?;
                rows.push(rec);
            }
        }
    }
    write_results(&out.join("horizon.csv"), &rows, config.output.append)?;
    Ok(rows)
}

/// RCD with one guidance knob varied and the others held at the configured
/// values. Rows go to `out/ablation_<axis>.csv`.
pub fn cmd_sweep_ablation(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    axis: Axis,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<ResultsRecord>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Usage("sweep-ablation needs at least one value and one seed".into()));
    }
    let guidances = values
        .iter()
        .map(|&v| {
            let g = axis.apply(&config.guidance, v);
            g.validate().map(|_| g)
        })
        .collect::<rcd_core::Result<Vec<_>>>()?;
    let planner = Planner::new(config, checkpoint_path)?;
    let mut rows = Vec::new();
    for (g, &v) in guidances.iter().zip(values) {
        for &seed in seeds {
            let (rec, _, _) = planner.run_cell(Method::Rcd, g, seed, axis.name(), v)?;
            rows.push(rec);
        }
    }
    write_results(&out.join(format!("ablation_{}.csv", axis.name())), &rows, config.output.append)?;
    Ok(rows)
}
