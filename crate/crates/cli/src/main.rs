//! `kdflow`: run checks, train the distillation phases, compare samplers and
//! demo the colour and diffusion operators.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use kdflow::harness::{
    diffusion_demo, distill, run_checks, run_phase1, run_phase2, sampler_experiment, write_table, CheckKind,
    CheckReport, ExperimentConfig, FlowNets, TableFormat, Workspace,
};
use kdflow::hvi_color::hue_sweep;
use kdflow::nn_blocks::save_params;

const SEED_ENV: &str = "RESTORECT_SEED";

#[derive(Parser, Debug)]
#[command(name = "kdflow", version, about = "Rectified-flow feature distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every gradient, oracle and invariant check and write a report.
    Check(Opts),
    /// Train the velocity predictors (phase 1) and save them.
    TrainPhase1(Opts),
    /// Train the student from saved phase-1 predictors (phase 2).
    TrainPhase2(Opts),
    /// Run both phases end to end.
    Distill(Opts),
    /// Fréchet distance and feature MSE of rectified flow vs DDIM per step count.
    CompareSamplers(Opts),
    /// Write a hue sweep in HVI coordinates, including both sides of the red seam.
    DemoHvi(Opts),
    /// Write per-iteration statistics of anisotropic diffusion on a noisy edge.
    DemoDiffusion(Opts),
    /// Run only the finite-difference gradient checks.
    GradCheck(Opts),
}

#[derive(Args, Debug, Clone)]
struct Opts {
    /// Experiment config (TOML). Required by train-phase1, train-phase2 and distill.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// RNG seed; overrides the config and the RESTORECT_SEED environment variable.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "kdflow-out")]
    out: PathBuf,
    /// Comma-separated step counts (compare-samplers), or iteration count (demo-diffusion).
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    /// Table format of the written files.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Record wall-clock milliseconds in the tables (breaks byte reproducibility).
    #[arg(long)]
    timing: bool,
    /// Phase-1 checkpoint directory for train-phase2 [default: <out>/checkpoints/phase1].
    #[arg(long, value_name = "DIR")]
    phase1: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => TableFormat::Csv,
            Format::Json => TableFormat::Json,
        }
    }
}

enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<kdflow::Error> for Failure {
    fn from(e: kdflow::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Check(o) => checks(&o, None, "check_report"),
        Command::GradCheck(o) => checks(&o, Some(CheckKind::Gradient), "grad_check_report"),
        Command::TrainPhase1(o) => train_phase1(&o),
        Command::TrainPhase2(o) => train_phase2(&o),
        Command::Distill(o) => run_distill(&o),
        Command::CompareSamplers(o) => compare(&o),
        Command::DemoHvi(o) => demo_hvi(&o),
        Command::DemoDiffusion(o) => demo_diffusion(&o),
    }
}

fn seed_from_env() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned 64-bit integer"))),
        Err(_) => Ok(None),
    }
}

fn effective_seed(o: &Opts) -> Result<Option<u64>, Failure> {
    match o.seed {
        Some(s) => Ok(Some(s)),
        None => seed_from_env(),
    }
}

/// Config from `--config` (or defaults when not `required`), with the seed,
/// step and timing overrides applied.
fn load_config(o: &Opts, cmd: &str, required: bool) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None if required => return Err(Failure::Usage(format!("{cmd} requires --config <PATH>"))),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = effective_seed(o)? {
        cfg.seed = s;
    }
    if cmd == "compare-samplers" {
        if let Some(st) = &o.steps {
            cfg.sampler_steps = st.clone();
        }
    }
    cfg.timing |= o.timing;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(o: &Opts) -> anyhow::Result<&Path> {
    std::fs::create_dir_all(&o.out).with_context(|| format!("creating {}", o.out.display()))?;
    Ok(&o.out)
}

fn format(o: &Opts, default: TableFormat) -> TableFormat {
    o.format.map(Into::into).unwrap_or(default)
}

fn checks(o: &Opts, only: Option<CheckKind>, stem: &str) -> Outcome {
    let registry = kdflow::harness::registry();
    let selected: Vec<_> = registry.into_iter().filter(|c| only.is_none_or(|k| c.kind == k)).collect();
    let report: CheckReport = run_checks(&selected);
    let dir = out_dir(o)?;
    let path = match format(o, TableFormat::Json) {
        TableFormat::Json => {
            let p = dir.join(format!("{stem}.json"));
            std::fs::write(&p, report.to_json()? + "\n").context("writing report")?;
            p
        }
        TableFormat::Csv => write_table(dir, stem, &report.results, TableFormat::Csv)?,
    };
    for f in report.failures() {
        eprintln!("FAIL {}: {}", f.name, f.detail);
    }
    println!("checks: {} passed, {} failed; report {}", report.passed, report.failed, path.display());
    Ok(report.all_passed())
}

fn phase1_line(s: &kdflow::harness::Phase1Summary) -> String {
    format!(
        "phase1: {} iterations, probe L_vel {:.4} -> {:.4} (ratio {:.3})",
        s.iterations,
        s.initial_vel,
        s.final_vel,
        s.final_vel / s.initial_vel
    )
}

fn phase2_line(s: &kdflow::harness::Phase2Summary) -> String {
    format!(
        "phase2: {} iterations, held-out L1 {:.4} -> {:.4} (teacher {:.4}), FLEX active {:.3}",
        s.iterations, s.heldout_l1_initial, s.heldout_l1_final, s.teacher_heldout_l1, s.flex_active_fraction
    )
}

fn save_nets(nets: &FlowNets, dir: &Path) -> anyhow::Result<()> {
    nets.save(dir).with_context(|| format!("saving predictors to {}", dir.display()))
}

fn train_phase1(o: &Opts) -> Outcome {
    let cfg = load_config(o, "train-phase1", true)?;
    let dir = out_dir(o)?;
    let ws = Workspace::prepare(&cfg)?;
    let mut metrics = Vec::new();
    let (nets, summary) = run_phase1(&ws, &mut metrics)?;
    save_nets(&nets, &dir.join("checkpoints").join("phase1"))?;
    write_table(dir, "metrics", &metrics, format(o, TableFormat::Csv))?;
    println!("{}", phase1_line(&summary));
    Ok(true)
}

fn train_phase2(o: &Opts) -> Outcome {
    let cfg = load_config(o, "train-phase2", true)?;
    let dir = out_dir(o)?;
    let ckpt = o.phase1.clone().unwrap_or_else(|| dir.join("checkpoints").join("phase1"));
    let mut nets = FlowNets::load(&cfg, &ckpt)
        .with_context(|| format!("loading phase-1 predictors from {} (run train-phase1 first)", ckpt.display()))?;
    let ws = Workspace::prepare(&cfg)?;
    let mut student = ws.init_student()?;
    let mut metrics = Vec::new();
    let summary = run_phase2(&ws, &mut nets, &mut student, &mut metrics)?;
    save_nets(&nets, &dir.join("checkpoints").join("phase2"))?;
    save_params(&student.params, &dir.join("checkpoints").join("student"))?;
    write_table(dir, "metrics", &metrics, format(o, TableFormat::Csv))?;
    println!("{}", phase2_line(&summary));
    Ok(true)
}

fn run_distill(o: &Opts) -> Outcome {
    let cfg = load_config(o, "distill", true)?;
    let dir = out_dir(o)?;
    let r = distill(&cfg)?;
    save_nets(&r.nets, &dir.join("checkpoints").join("phase2"))?;
    save_params(&r.student.params, &dir.join("checkpoints").join("student"))?;
    write_table(dir, "metrics", &r.metrics, format(o, TableFormat::Csv))?;
    println!("{}", phase1_line(&r.phase1));
    println!("{}", phase2_line(&r.phase2));
    Ok(true)
}

fn compare(o: &Opts) -> Outcome {
    let cfg = load_config(o, "compare-samplers", false)?;
    let dir = out_dir(o)?;
    let rows = sampler_experiment(&cfg)?;
    let path = write_table(dir, "samplers", &rows, format(o, TableFormat::Csv))?;
    let fd = |s: &str, k: usize| rows.iter().find(|r| r.sampler == s && r.steps == k).map(|r| r.frechet);
    let wins = cfg.sampler_steps.iter().filter(|&&k| matches!((fd("rf", k), fd("ddim", k)), (Some(a), Some(b)) if a < b)).count();
    println!(
        "compare-samplers: {} rows, rf below ddim at {}/{} step counts; table {}",
        rows.len(),
        wins,
        cfg.sampler_steps.len(),
        path.display()
    );
    Ok(true)
}

fn demo_hvi(o: &Opts) -> Outcome {
    let n = match o.steps.as_deref() {
        None => 360,
        Some([n]) if *n > 0 => *n,
        Some(_) => return Err(Failure::Usage("demo-hvi takes a single positive --steps value (sweep size)".into())),
    };
    let dir = out_dir(o)?;
    let rows = hue_sweep(n, 1.0, 1e-3)?;
    let path = write_table(dir, "hvi_sweep", &rows, format(o, TableFormat::Csv))?;
    let (a, b) = (rows[rows.len() - 2], rows[rows.len() - 1]);
    let gap = (a.h_polar - b.h_polar).abs().max((a.v_polar - b.v_polar).abs()).max((a.i_polar - b.i_polar).abs());
    println!("demo-hvi: {} hues, red-seam gap {gap:.2e} at delta 1e-3; table {}", n, path.display());
    Ok(true)
}

fn demo_diffusion(o: &Opts) -> Outcome {
    let iters = match o.steps.as_deref() {
        None => 50,
        Some([n]) => *n,
        Some(_) => return Err(Failure::Usage("demo-diffusion takes a single --steps value (iterations)".into())),
    };
    let seed = effective_seed(o)?.unwrap_or(0);
    let dir = out_dir(o)?;
    let rows = diffusion_demo(iters, 0.1, 0.2, seed)?;
    let path = write_table(dir, "diffusion", &rows, format(o, TableFormat::Csv))?;
    let (a, b) = (rows[0], rows[rows.len() - 1]);
    println!(
        "demo-diffusion: {iters} iterations, flat-region std {:.4} -> {:.4}, edge contrast {:.4} -> {:.4}; table {}",
        a.flat_std,
        b.flat_std,
        a.edge_contrast,
        b.edge_contrast,
        path.display()
    );
    Ok(true)
}
