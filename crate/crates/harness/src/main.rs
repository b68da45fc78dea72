use clap::{Args, Parser, Subcommand, ValueEnum};
use rcd_harness::check;
use rcd_harness::commands::{cmd_plan, cmd_sweep_ablation, cmd_sweep_horizon, cmd_train};
use rcd_harness::{Axis, ExperimentConfig, HarnessError, Method, Planner, Result, ResultsRecord};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rcd", version, about = "Train, sample and evaluate composed diffusion planners")]
struct Cli {
    /// JSON experiment configuration. Flags override values from the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration used when --config is not given.
    #[arg(long, global = true, value_enum, default_value = "bimodal")]
    preset: Preset,

    /// Seed for training (train) or sampling (everything else).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Leave the wall_secs column empty so reruns are byte-identical.
    #[arg(long, global = true)]
    no_wall_time: bool,

    /// Append rows to existing results files.
    #[arg(long, global = true)]
    append: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Bimodal,
    Maze,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint to read (or write, for train). Defaults to <out>/model.json.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training set and train the segment denoiser.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample one batch of plans and write them with validity flags.
    Plan {
        #[arg(long, default_value = "rcd")]
        method: String,
        #[arg(long)]
        num_plans: Option<usize>,
        /// Record per-step guidance diagnostics.
        #[arg(long)]
        diagnostics: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Both methods across plan lengths M.
    SweepHorizon {
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        m_list: Vec<usize>,
        /// Sampling seeds; defaults to --seed or the configured base seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// RCD with one guidance knob varied.
    SweepAblation {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run the identity and oracle battery.
    Check,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match cli.preset {
            Preset::Bimodal => ExperimentConfig::bimodal(),
            Preset::Maze => ExperimentConfig::maze(),
        },
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if cli.no_wall_time {
        cfg.output.record_wall_time = false;
    }
    if cli.append {
        cfg.output.append = true;
    }
    match &cli.command {
        Command::Train { steps, .. } => {
            if let Some(s) = cli.seed {
                cfg.training.optimizer.seed = s;
            }
            if let Some(n) = steps {
                cfg.training.optimizer.steps = *n;
            }
        }
        Command::Plan { num_plans, diagnostics, .. } => {
            if let Some(s) = cli.seed {
                cfg.sampling.base_seed = s;
            }
            if let Some(n) = num_plans {
                cfg.sampling.num_plans = *n;
            }
            cfg.sampling.record_diagnostics |= *diagnostics;
        }
        _ => {
            if let Some(s) = cli.seed {
                cfg.sampling.base_seed = s;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds_or_default(seeds: &[u64], cfg: &ExperimentConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.sampling.base_seed]
    } else {
        seeds.to_vec()
    }
}

fn print_rows(rows: &[ResultsRecord]) {
    for r in rows {
        println!(
            "{:<9} {}={:<6} seed={:<4} valid_rate={:.3} e_recon={:.4} e_ov={:.4}",
            r.method, r.axis_name, r.axis_value, r.seed, r.valid_rate, r.mean_e_recon, r.mean_e_ov
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.output.dir.clone();
    match &cli.command {
        Command::Train { model, .. } => {
            let t = cmd_train(&cfg, model.checkpoint.as_deref())?;
            let first = t.losses.iter().take(100).sum::<f64>() / t.losses.len().min(100) as f64;
            let tail = &t.losses[t.losses.len().saturating_sub(100)..];
            let last = tail.iter().sum::<f64>() / tail.len() as f64;
            println!(
                "trained {} steps in {:.1}s, loss {first:.4} -> {last:.4}; wrote {}",
                t.losses.len(),
                t.secs,
                t.checkpoint.display()
            );
        }
        Command::Plan { method, model, .. } => {
            let method: Method = method.parse()?;
            let planner = Planner::new(&cfg, model.checkpoint.as_deref())?;
            let (path, file) = cmd_plan(&planner, method, cfg.sampling.base_seed, &out)?;
            print_rows(std::slice::from_ref(&file.summary));
            println!("wrote {}", path.display());
        }
        Command::SweepHorizon { m_list, seeds, model } => {
            let rows = cmd_sweep_horizon(&cfg, model.checkpoint.as_deref(), m_list, &seeds_or_default(seeds, &cfg), &out)?;
            print_rows(&rows);
        }
        Command::SweepAblation { axis, values, seeds, model } => {
            let axis: Axis = axis.parse()?;
            let rows = cmd_sweep_ablation(
                &cfg,
                model.checkpoint.as_deref(),
                axis,
                values,
                &seeds_or_default(seeds, &cfg),
                &out,
            )?;
            print_rows(&rows);
        }
        Command::Check => {
            let outcomes = check::run_all(&cfg.schedule()?, cfg.sampling.base_seed)?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(HarnessError::CheckFailed(format!("{failed} of {} checks failed", outcomes.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::FAILURE
        }
    }
}
