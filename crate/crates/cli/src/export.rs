use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use pcl_core::{datagen, Mode, RunConfig, ToyModel};
use pcl_tensor::{Tape, Tensor};
use serde_json::json;

use crate::{print_json, Usage};

#[derive(Args)]
pub struct ExportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output CSV path.
    #[arg(long, default_value = "prompts.csv")]
    pub out: PathBuf,
    /// Mode used for the forward pass; defaults to the run's mode.
    #[arg(long, value_parser = crate::parse_mode)]
    pub mode: Option<Mode>,
    /// Test samples exported per task.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

fn push_rows(out: &mut String, prefix: &str, kind: &str, t: &Tensor) {
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            writeln!(out, "{prefix},{kind},{r},{c},{}", t.get(r, c)).expect("string write");
        }
    }
}

pub fn cmd_export(args: ExportArgs) -> Result<()> {
    let cfg: RunConfig = pcl_core::io::read_json(&args.run.join("config.json"))
        .with_context(|| format!("{} is not a run directory", args.run.display()))?;
    let model = ToyModel::load(&args.run.join("checkpoint"))?;
    let mode = args.mode.unwrap_or(cfg.train.mode);
    if !mode.uses_prompts() {
        return Err(Usage(format!("mode {mode} generates no instance prompts")).into());
    }
    let stream = datagen::generate(&cfg.stream)?;
    let mut csv = String::from("task,sample,label,block,kind,row,col,value\n");
    let mut samples = 0usize;
    for task in &stream.tasks {
        let take = args.limit.unwrap_or(task.test.len());
        for (i, s) in task.test.iter().take(take).enumerate() {
            let query = model.encode_query(&s.x)?;
            let tape = Tape::new();
            let out = model.forward(&tape, &s.x, &query, mode)?;
            for trace in &out.traces {
                let prefix = format!("{},{i},{},{}", task.id + 1, s.y, trace.block);
                if let Some(a) = &trace.coefficients {
                    push_rows(&mut csv, &prefix, "coefficient", a);
                }
                push_rows(&mut csv, &prefix, "prompt", &trace.prompts);
                if let Some(w) = &trace.weights {
                    push_rows(&mut csv, &prefix, "weight", w);
                }
            }
            samples += 1;
        }
    }
    std::fs::write(&args.out, &csv).with_context(|| format!("writing {}", args.out.display()))?;
    let rows = csv.lines().count() - 1;
    if args.json {
        print_json(&json!({"out": args.out, "mode": mode, "samples": samples, "rows": rows}));
    } else {
        println!("{samples} samples, {rows} rows -> {}", args.out.display());
    }
    Ok(())
}
