//! `pcl`: train continual-learning runs, sweep hyperparameters, compute
//! accuracy/forgetting from a matrix, run gradient checks and export
//! generated prompts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;
mod export;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pcl_core::gradcheck::full_battery;
use pcl_core::metrics::AccuracyMatrix;
use pcl_core::{datagen, run, Mode};
use pcl_tensor::fault::{self, Fault};
use serde_json::json;

use crate::config::ConfigArgs;

#[derive(Parser)]
#[command(name = "pcl", version, about = "Prompt-customized continual learning on synthetic task streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run over a task stream and write its artifacts.
    Train(TrainArgs),
    /// Average accuracy and forgetting of an accuracy-matrix CSV.
    Metrics(MetricsArgs),
    /// Run a grid of configurations over several seeds.
    Sweep(sweep::SweepArgs),
    /// Finite-difference checks of every primitive and the full objective.
    Gradcheck(GradcheckArgs),
    /// Dump coefficients, prompts and weights of a trained run as CSV.
    ExportPrompts(export::ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; defaults to `<root>/<mode>-<run id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    root: PathBuf,
    /// Directory for the generated-stream cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Regenerate the cached stream even if it is up to date.
    #[arg(long, requires = "cache")]
    regen: bool,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MetricsArgs {
    matrix: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true, value_name = "FAULT")]
    inject_fault: Option<String>,
    #[arg(long)]
    json: bool,
}

/// A problem with the command line or configuration (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// The command ran but its checks failed (exit code 1, report already
/// printed).
#[derive(Debug)]
struct Failed(String);

impl fmt::Display for Failed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Sweep(a) => sweep::cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportPrompts(a) => export::cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn percent(fraction: f64) -> String {
    format!("{:.2}", 100.0 * fraction)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| run::default_run_dir(&args.root, &cfg));
    let stream = match &args.cache {
        Some(cache) => datagen::cached_stream(&cfg.stream, &cache.join(cfg.stream.hash()), args.regen)?,
        None => datagen::generate(&cfg.stream)?,
    };
    let tasks = stream.tasks.len();
    let result = run::run_on(&cfg, &stream, Some(&dir), |_, r| {
        let f = r.forgetting.map_or("-".to_string(), percent);
        eprintln!("task {}/{tasks}  A_a {}  F {f}", r.task, percent(r.average_accuracy));
        Ok(())
    })?;
    let m = &result.outcome.matrix;
    let a = m.average_accuracy(tasks)?;
    let f = if tasks >= 2 { Some(m.forgetting(tasks)?) } else { None };
    let summary = json!({
        "run_id": result.manifest.run_id,
        "dir": dir,
        "mode": cfg.train.mode,
        "seed": cfg.seed,
        "tasks": tasks,
        "average_accuracy": a,
        "forgetting": f,
        "frozen_unchanged": result.frozen_hash_before == result.frozen_hash_after,
        "stages": result.outcome.stages,
    });
    pcl_core::io::write_json(&dir.join("summary.json"), &summary)?;
    if args.json {
        print_json(&summary);
    } else {
        println!("run    {}", result.manifest.run_id);
        println!("dir    {}", dir.display());
        println!("A_a({tasks})  {}", percent(a));
        match f {
            Some(f) => println!("F({tasks})    {}", percent(f)),
            None => println!("F({tasks})    -"),
        }
    }
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let m = read_matrix(&args.matrix)?;
    let mut stages = Vec::new();
    for t in 1..=m.stages() {
        let a = m.average_accuracy(t)?;
        let f = if t >= 2 { Some(m.forgetting(t)?) } else { None };
        stages.push((t, a, f));
    }
    if args.json {
        let rows: Vec<_> = stages
            .iter()
            .map(|&(t, a, f)| json!({"task": t, "average_accuracy": a, "forgetting": f}))
            .collect();
        print_json(&json!({"tasks": m.tasks(), "stages": rows}));
        return Ok(());
    }
    println!("{:<6}{:>8}{:>8}", "task", "A_a", "F");
    for (t, a, f) in stages {
        println!("{t:<6}{:>8}{:>8}", percent(a), f.map_or("-".to_string(), percent));
    }
    Ok(())
}

fn read_matrix(path: &Path) -> Result<AccuracyMatrix> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    AccuracyMatrix::from_csv(&text).with_context(|| path.display().to_string())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    match args.inject_fault.as_deref() {
        None => {}
        Some("sigmoid-backward-sign") => fault::inject(Fault::SigmoidBackwardSign),
        Some(other) => return Err(Usage(format!("unknown fault `{other}`")).into()),
    }
    let reports = full_battery(args.seed);
    fault::clear();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if args.json {
        let checks: Vec<_> = reports
            .iter()
            .map(|r| {
                json!({
                    "name": r.name,
                    "max_rel_error": r.max_rel_error,
                    "tolerance": r.tolerance,
                    "passed": r.passed(),
                })
            })
            .collect();
        print_json(&json!({"passed": failed.is_empty(), "checks": checks}));
    } else {
        for r in &reports {
            let status = if r.passed() { "PASS" } else { "FAIL" };
            println!("{status}  {:<28} max_rel_error {:.3e}  tol {:.0e}", r.name, r.max_rel_error, r.tolerance);
        }
        println!("{} of {} checks passed", reports.len() - failed.len(), reports.len());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failed(format!("gradient check failed: {}", failed.join(", "))).into())
    }
}

/// Parses a mode name for clap.
pub fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: pcl_core::Error| e.to_string())
}
