use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use followgen::config::RunConfig;
use followgen::data::{denormalize, generate_idm_episodes, write_episodes, SampleWindow, ScenarioTag};
use followgen::diffusion::{write_trace_jsonl, ScheduleKind, TraceStep};
use followgen::evaluation::{
    ablation_run, evaluate, plot_loss_curve, plot_metric_vs_k, plot_trace, report_table, AblationResult, ConstantVelocity,
    MetricSeries, MetricsReport, ModelPredictor, RunMeta,
};
use followgen::model::{FollowGen, Variant};
use followgen::training::{resume, train, Checkpoint, LogRecord};
use followgen::Error;
use serde::Serialize;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag or bad argument)
  3  invalid configuration
  4  missing or unreadable file
  5  invalid input data
  6  training diverged
  7  invalid checkpoint

Failures print one JSON line on stderr: {\"error\":KIND,\"code\":N,\"message\":TEXT}";

/// Car-following trajectory prediction with a scaled-noise conditional
/// diffusion model.
#[derive(Parser, Debug)]
#[command(name = "followgen", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the run seed (takes precedence over FOLLOWGEN_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: runs/default].
    #[arg(long, global = true, value_name = "PATH")]
    out_dir: Option<PathBuf>,
    /// H-H, A-H, H-A or SYNTH.
    #[arg(long, global = true)]
    scenario: Option<ScenarioTag>,
    /// Number of diffusion steps.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// linear, quadratic or sigmoid.
    #[arg(long, global = true)]
    schedule: Option<ScheduleKind>,
    /// full, no_noise_scaling, no_locattn_fft or no_cross_attention.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Evaluation horizon in seconds (3, 4 or 5); all three by default.
    #[arg(long, global = true, value_parser = ["3", "4", "5"])]
    horizon: Option<String>,
    /// Draws per case: trajectories written by `sample`, best-of-N for `eval`.
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    /// Write per-step sampling traces.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize IDM training and test episodes as CSV.
    GenData,
    /// Train a model and write checkpoint.json plus JSON-lines logs.
    Train {
        /// Continue from an existing checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sample future trajectories for the test episodes.
    Sample,
    /// Evaluate the trained model and the constant-velocity baseline.
    Eval,
    /// Train and evaluate every variant/K/schedule cell.
    Ablate,
    /// Render SVG figures from logs, traces and ablation results.
    Plot,
    /// Check the configuration and print it with defaults filled in.
    ValidateConfig,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 2),
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Parameter(_) => ("config", 3),
                Error::Io { .. } => ("io", 4),
                Error::Parse { .. }
                | Error::Schema(_)
                | Error::InvalidEpisode { .. }
                | Error::DegenerateDirection(_)
                | Error::Precondition(_)
                | Error::Generation { .. } => ("data", 5),
                Error::NonFiniteLoss { .. } => ("training", 6),
                Error::Checkpoint(_) => ("checkpoint", 7),
                _ => ("internal", 1),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&Failure::Usage(e.kind().to_string() + ": " + first_line(&e.to_string()))),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("").trim_start_matches("error: ")
}

fn report(f: &Failure) -> ExitCode {
    let (kind, code) = f.kind_and_code();
    let line = serde_json::json!({ "error": kind, "code": code, "message": f.message() });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(tag) = cli.scenario {
        cfg.data.synthesis.scenario = tag;
    }
    if let Some(k) = cli.k {
        cfg.model.diffusion.steps = k;
        cfg.ablation.k_grid = vec![k];
    }
    if let Some(kind) = cli.schedule {
        cfg.model.diffusion.kind = kind;
        cfg.ablation.schedules = vec![kind];
    }
    if let Some(v) = cli.variant {
        cfg.model.variant = v;
        cfg.ablation.variants = vec![v];
    }
    if let Some(h) = &cli.horizon {
        cfg.horizons = vec![h.parse().map_err(|_| Failure::Usage(format!("bad horizon {h}")))?];
    }
    if let Some(n) = cli.n_samples {
        cfg.eval.draws = n;
    }
    Ok(cfg.resolve()?)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::ValidateConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::GenData => gen_data(&cfg),
        Command::Train { resume } => train_cmd(&cfg, *resume),
        Command::Sample => sample_cmd(&cfg, cli.trace),
        Command::Eval => eval_cmd(&cfg),
        Command::Ablate => ablate_cmd(&cfg),
        Command::Plot => plot_cmd(&cfg),
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    for (spec, path) in [(&cfg.data.synthesis, cfg.train_path()), (&cfg.data.test_synthesis, cfg.test_path())] {
        let episodes = generate_idm_episodes(spec)?;
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        write_episodes(&path, &episodes)?;
        println!("wrote {} episodes to {}", episodes.len(), path.display());
    }
    write_text(&cfg.out_dir.join("config.toml"), &cfg.to_toml()?)
}

fn scenario_windows(cfg: &RunConfig, path: &Path) -> CliResult<Vec<SampleWindow>> {
    Ok(cfg.load_windows(path)?)
}

fn train_cmd(cfg: &RunConfig, resume_run: bool) -> CliResult<()> {
    let windows = scenario_windows(cfg, &cfg.train_path())?;
    let dir = cfg.out_dir.join("train");
    let ck_path = cfg.checkpoint_path();
    let out = if resume_run && ck_path.exists() {
        let mut ck = Checkpoint::load(&ck_path)?;
        ck.train_config.epochs = cfg.train.epochs;
        if ck.model_config != cfg.model {
            return Err(Error::Checkpoint("checkpoint was trained with a different model configuration".into()).into());
        }
        resume(&ck, &windows, Some(&dir))?
    } else {
        train(&windows, &cfg.model, &cfg.train, Some(&dir))?
    };
    write_text(&cfg.out_dir.join("config.toml"), &cfg.to_toml()?)?;
    if let Some(last) = out.epochs.last() {
        println!("epoch {} l_total {:.6} l_simple {:.6}", last.epoch, last.l_total, last.l_simple);
    }
    println!("checkpoint {}", ck_path.display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> CliResult<(Checkpoint, FollowGen)> {
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    let model = ck.model()?;
    Ok((ck, model))
}

#[derive(Serialize)]
struct CasePrediction {
    episode_id: String,
    offset: usize,
    /// World-frame positions, one trajectory per draw.
    samples: Vec<Vec<[f64; 2]>>,
}

fn rows_of(t: &followgen::Tensor, i: usize) -> Vec<[f64; 2]> {
    let tf = t.shape()[1];
    (0..tf).map(|j| [t.at(&[i, j, 0]), t.at(&[i, j, 1])]).collect()
}

fn sample_cmd(cfg: &RunConfig, trace: bool) -> CliResult<()> {
    let (_, model) = load_model(cfg)?;
    let windows = scenario_windows(cfg, &cfg.test_path())?;
    let draws = cfg.eval.draws;
    let dir = cfg.out_dir.join("samples");
    let mut cases: Vec<CasePrediction> = windows
        .iter()
        .map(|w| CasePrediction { episode_id: w.episode_id.clone(), offset: w.offset, samples: Vec::new() })
        .collect();
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    for j in 0..draws {
        for (ci, chunk) in refs.chunks(64).enumerate() {
            let first = ci * 64;
            let seeds: Vec<u64> = FollowGen::case_seeds(cfg.seed, first, chunk.len()).iter().map(|s| s ^ ((j as u64) << 32)).collect();
            let want_trace = trace && j == 0 && ci == 0;
            let (pred, steps) = model.sample(chunk, &seeds, want_trace)?;
            for (i, w) in chunk.iter().enumerate() {
                cases[first + i].samples.push(denormalize(&rows_of(&pred, i), &w.frame_origin));
            }
            if want_trace {
                let w = chunk[0];
                let truth = &w.x_fol_fut;
                let trace_steps: Vec<TraceStep> = steps
                    .iter()
                    .map(|(k, x)| {
                        let pos = rows_of(x, 0);
                        let err = pos.iter().zip(truth).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / pos.len() as f64;
                        TraceStep { k: *k, positions: pos, abs_error_if_gt_known: Some(err) }
                    })
                    .collect();
                create_dir(&dir)?;
                write_trace_jsonl(&dir.join("trace.jsonl"), &trace_steps)?;
                write_json(&dir.join("trace_case.json"), w)?;
            }
        }
    }
    write_json(&dir.join("predictions.json"), &cases)?;
    println!("wrote {} cases x {draws} draws to {}", cases.len(), dir.join("predictions.json").display());
    Ok(())
}

fn write_reports(dir: &Path, reports: &[MetricsReport], baseline: &[MetricsReport]) -> CliResult<()> {
    for r in reports {
        write_text(&dir.join(format!("metrics_{}s.json", r.horizon_s)), &(r.to_json()? + "\n"))?;
    }
    write_json(&dir.join("baseline_constant_velocity.json"), &baseline)?;
    let table = report_table(
        &["Scenario", "Method"],
        &[
            (vec![reports[0].scenario.to_string(), "FollowGen".into()], reports.to_vec()),
            (vec![baseline[0].scenario.to_string(), "Constant velocity".into()], baseline.to_vec()),
        ],
    );
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    write_text(&dir.join("table.txt"), &table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> CliResult<()> {
    let (ck, model) = load_model(cfg)?;
    let windows = scenario_windows(cfg, &cfg.test_path())?;
    let meta = RunMeta {
        scenario: ck.train_config.scenario,
        seed: cfg.seed,
        k: model.schedule.steps,
        schedule: model.schedule.kind.to_string(),
        variant: model.config.variant.to_string(),
    };
    let draws = cfg.eval.draws;
    let reports = evaluate(&ModelPredictor { model: &model, seed: cfg.seed, draws }, &windows, &cfg.horizons, &meta, draws)?;
    let baseline = evaluate(&ConstantVelocity, &windows, &cfg.horizons, &meta, 1)?;
    write_reports(&cfg.out_dir.join("eval"), &reports, &baseline)
}

fn ablate_cmd(cfg: &RunConfig) -> CliResult<()> {
    let train_w = scenario_windows(cfg, &cfg.train_path())?;
    let test_w = scenario_windows(cfg, &cfg.test_path())?;
    let dir = cfg.out_dir.join("ablation");
    let result = ablation_run(&cfg.model, &cfg.train, &cfg.ablation, &train_w, &test_w, &cfg.horizons, cfg.seed, Some(&dir));
    write_json(&dir.join("result.json"), &result)?;
    let table = result.table();
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    write_text(&dir.join("table.txt"), &table.to_text())?;
    print!("{}", table.to_text());
    if let Some(failed) = result.cells.iter().find(|c| c.error.is_some()) {
        eprintln!("cell {}-k{}-{} failed: {}", failed.variant, failed.k, failed.schedule, failed.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn plot_cmd(cfg: &RunConfig) -> CliResult<()> {
    let plots = cfg.out_dir.join("plots");
    create_dir(&plots)?;
    let mut made = 0;
    let log = cfg.out_dir.join("train").join("train_log.jsonl");
    if log.exists() {
        let records: Vec<LogRecord> = read_text(&log)?
            .lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
            .collect::<Result<_, _>>()?;
        plot_loss_curve(&plots.join("loss.svg"), &records)?;
        made += 1;
    }
    let trace = cfg.out_dir.join("samples").join("trace.jsonl");
    let case = cfg.out_dir.join("samples").join("trace_case.json");
    if trace.exists() && case.exists() {
        let steps: Vec<TraceStep> = read_text(&trace)?
            .lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
            .collect::<Result<_, _>>()?;
        let w: SampleWindow = serde_json::from_str(&read_text(&case)?).map_err(|e| Error::Serde(e.to_string()))?;
        let stride = (steps.len() / 5).max(1);
        let shown: Vec<(usize, Vec<[f64; 2]>)> =
            steps.iter().enumerate().filter(|(i, _)| i % stride == 0 || *i + 1 == steps.len()).map(|(_, s)| (s.k, s.positions.clone())).collect();
        plot_trace(&plots.join("trace.svg"), &w.x_fol_his, &w.x_fol_fut, &shown)?;
        made += 1;
    }
    let ablation = cfg.out_dir.join("ablation").join("result.json");
    if ablation.exists() {
        let result: AblationResult = serde_json::from_str(&read_text(&ablation)?).map_err(|e| Error::Serde(e.to_string()))?;
        for metric in ["ADE", "FDE"] {
            let mut groups: Vec<(String, String)> = Vec::new();
            for c in &result.cells {
                let key = (c.variant.to_string(), c.schedule.to_string());
                if !groups.contains(&key) {
                    groups.push(key);
                }
            }
            let mut series = Vec::new();
            for (v, s) in &groups {
                for &h in &cfg.horizons {
                    let points: Vec<(f64, f64)> = result
                        .cells
                        .iter()
                        .filter(|c| &c.variant.to_string() == v && &c.schedule.to_string() == s)
                        .filter_map(|c| c.reports.iter().find(|r| r.horizon_s == h).map(|r| (c.k as f64, if metric == "ADE" { r.ade } else { r.fde })))
                        .collect();
                    if !points.is_empty() {
                        series.push(MetricSeries { label: format!("{v} {s} {h}s"), points });
                    }
                }
            }
            plot_metric_vs_k(&plots.join(format!("{}_vs_k.svg", metric.to_lowercase())), metric, &series)?;
            made += 1;
        }
    }
    println!("wrote {made} figures to {}", plots.display());
    Ok(())
}
