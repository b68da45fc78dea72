//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL ...` line
//! straight to stdout (so it shows up even when output is captured) and
//! then asserts. Tests take a global lock so timings are not distorted by
//! running side by side.

use rand::Rng;
use rcd_core::composition::SegmentLayout;
use rcd_core::diffusion::tweedie_estimate;
use rcd_core::guidance::{
    guidance_gradient_with_noise, overlap_consistency, pairwise_overlap_mismatch, self_recon_error_with_noise,
};
use rcd_core::nn::random_small_mlp;
use rcd_core::rng::{normal_tensor, stream, Purpose, StreamRng};
use rcd_core::toy::BimodalToySpec;
use rcd_core::{Denoiser, GmmDenoiser, GuidanceConfig, MlpDenoiser, NoiseSchedule, Tensor};
use rcd_harness::commands::{cmd_sweep_ablation, cmd_sweep_horizon, cmd_train};
use rcd_harness::config::DenoiserSource;
use rcd_harness::{Axis, ExperimentConfig, Method, Planner, ResultsRecord};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;
use tempfile::TempDir;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {criterion:>2}: {tag} {detail}").unwrap();
    out.flush().unwrap();
}

fn toy_schedule() -> NoiseSchedule {
    let c = ExperimentConfig::bimodal().schedule;
    NoiseSchedule::linear(c.steps, c.beta_start, c.beta_end).unwrap()
}

/// Mean of the per-segment values covering each plan variable, written out
/// variable by variable rather than through the library's index tables.
fn average_over_segments(per_segment: &[Vec<f64>], layout: &SegmentLayout) -> Vec<f64> {
    let d = layout.dim;
    let stride = layout.length - layout.overlap;
    let mut sum = vec![0.0; layout.horizon() * d];
    let mut count = vec![0usize; layout.horizon()];
    for (j, seg) in per_segment.iter().enumerate() {
        for k in 0..layout.length {
            let i = j * stride + k;
            count[i] += 1;
            for c in 0..d {
                sum[i * d + c] += seg[k * d + c];
            }
        }
    }
    sum.iter().enumerate().map(|(idx, s)| s / count[idx / d] as f64).collect()
}

struct Instance {
    layout: SegmentLayout,
    model: MlpDenoiser,
    x0: Tensor,
    eps: Tensor,
    s: usize,
}

impl Instance {
    /// Random layout, random small MLP, and a clean plan obtained as the
    /// composed clean estimate of a random noisy plan at a random level `t`.
    fn draw(rng: &mut StreamRng, schedule: &NoiseSchedule) -> Self {
        let length = rng.random_range(2..7);
        let layout = SegmentLayout::new(
            rng.random_range(1..6),
            length,
            rng.random_range(1..=length / 2),
            rng.random_range(1..3),
        )
        .unwrap();
        let model = random_small_mlp(layout.segment_width(), &[16, 16], 8, rng);
        let shape = [layout.horizon(), layout.dim];
        let xt = normal_tensor(rng, &shape);
        let t = rng.random_range(1..=schedule.steps());
        let eps_t = composed_eps(&model, &xt, &layout, t, schedule);
        let x0 = tweedie_estimate(&Tensor::new(shape.to_vec(), eps_t).unwrap(), &xt, t, schedule).unwrap();
        Instance {
            layout,
            model,
            x0,
            eps: normal_tensor(rng, &shape),
            s: rng.random_range(1..=schedule.steps()),
        }
    }

    /// Per-segment noise predictions at the probe level.
    fn probe(&self, schedule: &NoiseSchedule) -> Vec<Vec<f64>> {
        let a = schedule.alpha_cum(self.s).unwrap();
        let x_s: Vec<f64> = self
            .x0
            .data()
            .iter()
            .zip(self.eps.data())
            .map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e)
            .collect();
        segment_eps(&self.model, &x_s, &self.layout, self.s, schedule)
    }
}

fn segment_eps(model: &dyn Denoiser, plan: &[f64], layout: &SegmentLayout, t: usize, schedule: &NoiseSchedule) -> Vec<Vec<f64>> {
    let d = layout.dim;
    let stride = layout.length - layout.overlap;
    (0..layout.segments)
        .map(|j| {
            let seg = plan[j * stride * d..(j * stride + layout.length) * d].to_vec();
            let input = Tensor::new(vec![1, layout.segment_width()], seg).unwrap();
            model.predict(&input, t, schedule).unwrap().into_data()
        })
        .collect()
}

fn composed_eps(model: &dyn Denoiser, plan: &Tensor, layout: &SegmentLayout, t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    average_over_segments(&segment_eps(model, plan.data(), layout, t, schedule), layout)
}

#[test]
fn criterion_01_reconstruction_residual() {
    let _g = serial();
    let t0 = Instant::now();
    let sched = toy_schedule();
    let mut rng = stream(101, 0, Purpose::Aux);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let inst = Instance::draw(&mut rng, &sched);
        let rec = self_recon_error_with_noise(&inst.x0, &inst.eps, &inst.model, &inst.layout, &sched, inst.s).unwrap();
        let a = sched.alpha_cum(inst.s).unwrap();
        let per_seg = inst.probe(&sched);
        let eps_bar = average_over_segments(&per_seg, &inst.layout);
        for k in 0..inst.x0.len() {
            let lhs = inst.x0.data()[k] - rec.x0_rec.data()[k];
            let rhs = -((1.0 - a) / a).sqrt() * (inst.eps.data()[k] - eps_bar[k]);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 10.0;
    report(1, pass, &format!("reconstruction residual max deviation {worst:.2e} (<= 1e-10), {secs:.2}s (< 10s)"));
    assert!(pass);
}

#[test]
fn criterion_02_overlap_mismatch_decomposition() {
    let _g = serial();
    let t0 = Instant::now();
    let sched = toy_schedule();
    let mut rng = stream(102, 0, Purpose::Aux);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for _ in 0..200 {
        let inst = Instance::draw(&mut rng, &sched);
        let rec = self_recon_error_with_noise(&inst.x0, &inst.eps, &inst.model, &inst.layout, &sched, inst.s).unwrap();
        let a = sched.alpha_cum(inst.s).unwrap();
        let per_seg = inst.probe(&sched);
        let (l, o, d) = (inst.layout.length, inst.layout.overlap, inst.layout.dim);
        let score = |e: f64| -e / (1.0 - a).sqrt();
        for (k, m) in pairwise_overlap_mismatch(&rec.per_segment, &inst.layout).iter().enumerate() {
            let gap: f64 = per_seg[k][(l - o) * d..]
                .iter()
                .zip(&per_seg[k + 1][..o * d])
                .map(|(p, q)| (score(*p) - score(*q)).powi(2))
                .sum();
            worst = worst.max((m - (1.0 - a).powi(2) / a * gap).abs());
            pairs += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 10.0 && pairs > 0;
    report(
        2,
        pass,
        &format!("overlap mismatch vs score gap max deviation {worst:.2e} over {pairs} pairs (<= 1e-10), {secs:.2}s (< 10s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_density_summand() {
    let _g = serial();
    let t0 = Instant::now();
    let sched = toy_schedule();
    let mut rng = stream(103, 0, Purpose::Aux);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let inst = Instance::draw(&mut rng, &sched);
        let rec = self_recon_error_with_noise(&inst.x0, &inst.eps, &inst.model, &inst.layout, &sched, inst.s).unwrap();
        let a = sched.alpha_cum(inst.s).unwrap();
        let per_seg = inst.probe(&sched);
        let eps_bar = average_over_segments(&per_seg, &inst.layout);
        let direct: f64 = inst.eps.data().iter().zip(&eps_bar).map(|(e, b)| (e - b).powi(2)).sum();
        worst = worst.max((a / (1.0 - a) * rec.e_recon - direct).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 10.0;
    report(3, pass, &format!("scaled E_recon vs noise error max deviation {worst:.2e} (<= 1e-10), {secs:.2}s (< 10s)"));
    assert!(pass);
}

/// Tape-free objective assembled from the per-segment predictions.
fn objective(
    model: &dyn Denoiser,
    xt: &Tensor,
    t: usize,
    eps: &Tensor,
    layout: &SegmentLayout,
    sched: &NoiseSchedule,
    config: &GuidanceConfig,
) -> f64 {
    let eps_t = Tensor::new(xt.shape().to_vec(), composed_eps(model, xt, layout, t, sched)).unwrap();
    let x0 = tweedie_estimate(&eps_t, xt, t, sched).unwrap();
    let s = sched.probe_level(config.probe_ratio);
    let rec = self_recon_error_with_noise(&x0, eps, model, layout, sched, s).unwrap();
    rec.e_recon + config.lambda_ov * overlap_consistency(&rec.per_segment, layout).unwrap()
}

#[test]
fn criterion_04_gradient_matches_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let sched = toy_schedule();
    let config = GuidanceConfig::default();
    let mut rng = stream(104, 0, Purpose::Aux);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let inst = Instance::draw(&mut rng, &sched);
        let xt = normal_tensor(&mut rng, &[inst.layout.horizon(), inst.layout.dim]);
        let t = rng.random_range(1..=sched.steps());
        let g = guidance_gradient_with_noise(&xt, t, &inst.eps, &inst.model, &inst.layout, &sched, &config).unwrap();
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for k in 0..xt.len() {
            let mut up = xt.clone();
            up.data_mut()[k] += h;
            let mut down = xt.clone();
            down.data_mut()[k] -= h;
            let fd = (objective(&inst.model, &up, t, &inst.eps, &inst.layout, &sched, &config)
                - objective(&inst.model, &down, t, &inst.eps, &inst.layout, &sched, &config))
                / (2.0 * h);
            err = err.max((fd - g.data()[k]).abs());
            scale = scale.max(g.data()[k].abs()).max(fd.abs());
        }
        worst = worst.max(err / scale.max(1e-12));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 60.0;
    report(4, pass, &format!("gradient vs central differences worst relative error {worst:.2e} (<= 1e-4), {secs:.2}s (< 60s)"));
    assert!(pass);
}

#[test]
fn criterion_05_midpoint_reconstructs_worse_than_mode() {
    let _g = serial();
    let t0 = Instant::now();
    let sched = toy_schedule();
    let spec = BimodalToySpec::default();
    let model = GmmDenoiser::new(spec.interior_mixture().unwrap());
    let layout = spec.layout(1).unwrap();
    let s = sched.probe_level(0.4);
    let n = layout.horizon();
    let mid = Tensor::new(vec![n, 1], vec![0.0; n]).unwrap();
    let mode = Tensor::new(vec![n, 1], vec![1.0; n]).unwrap();
    let mut rng = stream(105, 0, Purpose::Aux);
    let (mut e_mid, mut e_mode) = (0.0, 0.0);
    for _ in 0..100 {
        let eps = normal_tensor(&mut rng, &[n, 1]);
        e_mid += self_recon_error_with_noise(&mid, &eps, &model, &layout, &sched, s).unwrap().e_recon;
        e_mode += self_recon_error_with_noise(&mode, &eps, &model, &layout, &sched, s).unwrap().e_recon;
    }
    let ratio = e_mid / e_mode;
    let secs = t0.elapsed().as_secs_f64();
    let pass = ratio >= 3.0 && secs < 10.0;
    report(
        5,
        pass,
        &format!("midpoint/mode E_recon ratio {ratio:.2} (>= 3) at s={s} of T={}, {secs:.2}s (< 10s)", sched.steps()),
    );
    assert!(pass);
}

struct Trained {
    _dir: TempDir,
    config: ExperimentConfig,
    checkpoint: PathBuf,
    secs: f64,
}

fn train_preset(mut config: ExperimentConfig) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    config.output.dir = dir.path().to_path_buf();
    config.output.record_wall_time = false;
    let out = cmd_train(&config, None).unwrap();
    Trained {
        _dir: dir,
        config,
        checkpoint: out.checkpoint,
        secs: out.secs,
    }
}

fn toy_model() -> &'static Trained {
    static TOY: OnceLock<Trained> = OnceLock::new();
    TOY.get_or_init(|| train_preset(ExperimentConfig::bimodal()))
}

fn maze_model() -> &'static Trained {
    static MAZE: OnceLock<Trained> = OnceLock::new();
    MAZE.get_or_init(|| train_preset(ExperimentConfig::maze()))
}

fn mean_rate(rows: &[ResultsRecord], keep: impl Fn(&ResultsRecord) -> bool) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| keep(r)).map(|r| r.valid_rate).collect();
    assert!(!v.is_empty());
    v.iter().sum::<f64>() / v.len() as f64
}

const SEEDS: [u64; 3] = [1, 2, 3];

#[test]
fn criterion_06_valid_rate_versus_horizon() {
    let _g = serial();
    let t0 = Instant::now();
    let toy = toy_model();
    let out = tempfile::tempdir().unwrap();
    let ms = [2usize, 4, 6, 8];
    let rows = cmd_sweep_horizon(&toy.config, Some(&toy.checkpoint), &ms, &SEEDS, out.path()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let rate = |method: &str, m: usize| mean_rate(&rows, |r| r.method == method && r.axis_value == m as f64);
    let unguided: Vec<f64> = ms.iter().map(|&m| rate("unguided", m)).collect();
    let rcd: Vec<f64> = ms.iter().map(|&m| rate("rcd", m)).collect();
    let non_increasing = unguided.windows(2).all(|w| w[1] <= w[0]);
    let unguided_low = unguided[3] < 0.60;
    let rcd_high = rcd.iter().all(|&r| r >= 0.85);
    let gap = rcd[3] - unguided[3];
    let checks = [
        ("unguided non-increasing", non_increasing),
        ("unguided(M=8) < 0.60", unguided_low),
        ("rcd >= 0.85 at every M", rcd_high),
        ("rcd - unguided >= 0.25 at M=8", gap >= 0.25),
        ("training <= 300s", toy.secs <= 300.0),
        ("total < 600s", secs + toy.secs < 600.0),
    ];
    let pass = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        6,
        pass,
        &format!(
            "M=2,4,6,8 unguided {unguided:.3?} rcd {rcd:.3?} gap@8 {gap:.3}; train {:.0}s sweep {secs:.0}s; failed: {failed:?}",
            toy.secs
        ),
    );
    assert!(pass, "failed sub-checks: {failed:?}");
}

#[test]
fn criterion_07_ablation_directions() {
    let _g = serial();
    let toy = toy_model();
    let t0 = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let defaults = toy.config.guidance;
    let w_rows = cmd_sweep_ablation(&toy.config, Some(&toy.checkpoint), Axis::W, &[0.0, defaults.w], &SEEDS, out.path()).unwrap();
    let l_rows = cmd_sweep_ablation(
        &toy.config,
        Some(&toy.checkpoint),
        Axis::LambdaOv,
        &[0.0, defaults.lambda_ov],
        &SEEDS,
        out.path(),
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let w0 = mean_rate(&w_rows, |r| r.axis_value == 0.0);
    let w_default = mean_rate(&w_rows, |r| r.axis_value == defaults.w);
    let l0 = mean_rate(&l_rows, |r| r.axis_value == 0.0);
    let l_default = mean_rate(&l_rows, |r| r.axis_value == defaults.lambda_ov);
    let w_ok = w_default >= w0 + 0.25;
    let l_ok = l_default >= l0 - 0.02;
    let pass = w_ok && l_ok && secs < 600.0;
    report(
        7,
        pass,
        &format!(
            "M=8 w=0 {w0:.3} w=0.25 {w_default:.3} (need +0.25: {w_ok}); lambda_ov=0 {l0:.3} lambda_ov=0.5 {l_default:.3} (need >= within 0.02: {l_ok}); {secs:.0}s (< 600s)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_guidance_raises_composed_density() {
    let _g = serial();
    let t0 = Instant::now();
    let mut config = ExperimentConfig::bimodal();
    config.denoiser = DenoiserSource::ExactMixture;
    config.sampling.num_plans = 500;
    let planner = Planner::new(&config, None).unwrap();
    let logps = |method: Method| -> Vec<f64> {
        let batch = planner.sample(method, &config.guidance, 8).unwrap();
        let eval = planner.evaluate(&batch).unwrap();
        eval.logp.iter().map(|v| v.expect("no failed plans")).collect()
    };
    let unguided = logps(Method::Unguided);
    let rcd = logps(Method::Rcd);
    let n = rcd.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // Both batches use the same chain streams, so plan i of each method starts
    // from the same noise: resample chain indices and keep the pairs.
    let diff: Vec<f64> = rcd.iter().zip(&unguided).map(|(r, u)| r - u).collect();
    let mut rng = stream(108, 0, Purpose::Aux);
    let mut paired: Vec<f64> = (0..2000)
        .map(|_| (0..n).map(|_| diff[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let mut unpaired: Vec<f64> = (0..2000)
        .map(|_| (0..n).map(|_| rcd[rng.random_range(0..n)] - unguided[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    paired.sort_by(f64::total_cmp);
    unpaired.sort_by(f64::total_cmp);
    let lower = paired[100];
    let secs = t0.elapsed().as_secs_f64();
    let pass = lower > 0.0 && secs < 120.0;
    report(
        8,
        pass,
        &format!(
            "mean composed log-density unguided {:.3} rcd {:.3}, paired bootstrap 95% lower bound of difference {lower:.3} (> 0; unpaired {:.3}), {secs:.1}s (< 120s)",
            mean(&unguided),
            mean(&rcd),
            unpaired[100]
        ),
    );
    assert!(pass);
}

/// Which corridors of the ring maze a plan enters: (top, bottom).
fn corridors(planner: &Planner, plan: &[f64]) -> (bool, bool) {
    let maze = planner.maze().unwrap();
    let cells = maze.cells_visited(plan);
    // columns strictly between the start and goal columns
    let between = 2..maze.width() - 2;
    let in_row = |r: usize| cells.iter().any(|&(cr, cc)| cr == r && between.contains(&cc));
    (in_row(1), in_row(maze.height() - 2))
}

#[test]
fn criterion_09_maze_feasibility_and_diversity() {
    let _g = serial();
    let t0 = Instant::now();
    let maze = maze_model();
    let planner = Planner::new(&maze.config, Some(&maze.checkpoint)).unwrap();
    let (mut unguided, mut rcd) = (Vec::new(), Vec::new());
    let (mut top, mut bottom, mut valid_rcd) = (0usize, 0usize, 0usize);
    for seed in SEEDS {
        let (u, _, _) = planner.run_cell(Method::Unguided, &maze.config.guidance, seed, "M", 6.0).unwrap();
        let (r, batch, eval) = planner.run_cell(Method::Rcd, &maze.config.guidance, seed, "M", 6.0).unwrap();
        unguided.push(u.valid_rate);
        rcd.push(r.valid_rate);
        for i in 0..batch.len() {
            if eval.valid[i] {
                valid_rcd += 1;
                let (t, b) = corridors(&planner, batch.plan(i));
                top += t as usize;
                bottom += b as usize;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64() + maze.secs;
    let mu = unguided.iter().sum::<f64>() / 3.0;
    let mr = rcd.iter().sum::<f64>() / 3.0;
    let frac = |k: usize| if valid_rcd == 0 { 0.0 } else { k as f64 / valid_rcd as f64 };
    let lift_ok = mr >= mu + 0.15;
    let both_ok = frac(top) >= 0.10 && frac(bottom) >= 0.10;
    let pass = lift_ok && both_ok && secs < 900.0;
    report(
        9,
        pass,
        &format!(
            "M=6 unguided {mu:.3} rcd {mr:.3} (need +0.15: {lift_ok}); valid rcd plans in top/bottom corridor {:.2}/{:.2} (each >= 0.10: {both_ok}); {secs:.0}s incl. training (< 900s)",
            frac(top),
            frac(bottom)
        ),
    );
    assert!(pass);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn criterion_10_reruns_are_byte_identical() {
    let _g = serial();
    let t0 = Instant::now();
    let exe = env!("CARGO_BIN_EXE_rcd");
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("config.json");
    let mut config = ExperimentConfig::bimodal();
    config.schedule.steps = 64;
    config.schedule.beta_end = 0.1;
    config.model.hidden = vec![32, 32];
    config.training.optimizer.steps = 150;
    config.training.dataset_size = 2000;
    config.sampling.num_plans = 40;
    config.output.record_wall_time = false;
    std::fs::write(&cfg_path, config.to_json()).unwrap();

    let run = |dir: &Path, args: &[&str]| -> Vec<u8> {
        let out = std::process::Command::new(exe)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(dir)
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let mut mismatches = Vec::new();
    let dirs = [root.path().join("a"), root.path().join("b")];
    let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
    for dir in &dirs {
        let mut files = Vec::new();
        run(dir, &["--seed", "4", "train"]);
        files.push(read(&dir.join("model.json")));
        files.push(read(&dir.join("model.loss.csv")));
        run(dir, &["--seed", "5", "plan", "--method", "rcd", "--diagnostics"]);
        files.push(read(&dir.join("plans_rcd_seed5.json")));
        run(dir, &["sweep-horizon", "--m-list", "2,4", "--seeds", "1,2"]);
        files.push(read(&dir.join("horizon.csv")));
        for axis in ["w", "lambda_ov", "probe_ratio"] {
            let values = match axis {
                "w" => "0,0.25",
                "lambda_ov" => "0,0.5",
                _ => "0.2,0.4",
            };
            run(dir, &["sweep-ablation", "--axis", axis, "--values", values, "--seeds", "1"]);
            files.push(read(&dir.join(format!("ablation_{axis}.csv"))));
        }
        files.push(run(dir, &["check"]));
        outputs.push(files);
    }
    let names = ["checkpoint", "loss curve", "plans", "horizon.csv", "ablation_w.csv", "ablation_lambda_ov.csv", "ablation_probe_ratio.csv", "check output"];
    for (k, name) in names.iter().enumerate() {
        if outputs[0][k] != outputs[1][k] {
            mismatches.push(*name);
        }
    }
    // the shared default cell agrees across ablation sweeps
    let w = rcd_harness::results::read_results(&dirs[0].join("ablation_w.csv")).unwrap();
    let l = rcd_harness::results::read_results(&dirs[0].join("ablation_lambda_ov.csv")).unwrap();
    let shared = (w[1].valid_rate, w[1].mean_e_recon) == (l[1].valid_rate, l[1].mean_e_recon);
    let secs = t0.elapsed().as_secs_f64();
    let pass = mismatches.is_empty() && shared;
    report(
        10,
        pass,
        &format!("{} outputs compared across reruns, differing: {mismatches:?}; shared ablation cell equal: {shared}; {secs:.1}s", names.len()),
    );
    assert!(pass);
}
