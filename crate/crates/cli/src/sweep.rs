use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::ConfigArgs;
use crate::{percent, print_json, Usage};
use pcl_core::run;

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grid axis `KEY=V1,V2,...`; repeat for more axes (full product).
    #[arg(long = "grid", value_name = "KEY=VALUES", required = true)]
    pub grid: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Aggregated CSV output path.
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    /// Also write every run's artifacts below this directory.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunScore {
    pub seed: u64,
    pub run_id: String,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub point: Vec<(String, String)>,
    pub runs: Vec<RunScore>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
}

/// Parses the grid axes and expands them into their full product.
pub fn grid_points(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut parsed = Vec::new();
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| Usage(format!("grid axis `{axis}` is not KEY=V1,V2,...")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Usage(format!("grid axis `{key}` has no values")).into());
        }
        if parsed.iter().any(|(k, _): &(String, Vec<String>)| k == key.trim()) {
            return Err(Usage(format!("grid axis `{key}` given twice")).into());
        }
        parsed.push((key.trim().to_string(), values));
    }
    parsed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &parsed {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points.sort_by(|a, b| compare_points(a, b));
    points.dedup();
    Ok(points)
}

/// Orders by parameter name, then numerically by value when both parse.
fn compare_points(a: &[(String, String)], b: &[(String, String)]) -> Ordering {
    for ((ka, va), (kb, vb)) in a.iter().zip(b) {
        let ord = ka.cmp(kb).then_with(|| match (va.parse::<f64>(), vb.parse::<f64>()) {
            (Ok(x), Ok(y)) => x.total_cmp(&y),
            _ => va.cmp(vb),
        });
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_csv(keys: &[String], rows: &[Aggregate]) -> String {
    let mut out = keys.join(",");
    out.push_str(",seeds,accuracy_mean,accuracy_std,forgetting_mean,forgetting_std\n");
    for r in rows {
        for (_, v) in &r.point {
            write!(out, "{v},").expect("string write");
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), percent);
        writeln!(
            out,
            "{},{},{},{},{}",
            r.runs.len(),
            percent(r.accuracy_mean),
            percent(r.accuracy_std),
            opt(r.forgetting_mean),
            opt(r.forgetting_std)
        )
        .expect("string write");
    }
    out
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let points = grid_points(&args.grid)?;
    if args.seeds.is_empty() {
        return Err(Usage("no seeds given".into()).into());
    }
    let keys: Vec<String> = points[0].iter().map(|(k, _)| k.clone()).collect();
    let mut jobs = Vec::new();
    for (p, point) in points.iter().enumerate() {
        for &seed in &args.seeds {
            let mut extra = point.clone();
            extra.push(("seed".into(), seed.to_string()));
            jobs.push((p, seed, args.config.build_with(&extra)?));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .context("building worker pool")?;
    let scores: Vec<(usize, RunScore)> = pool.install(|| {
        jobs.par_iter()
            .map(|(p, seed, cfg)| -> Result<(usize, RunScore)> {
                let dir = args.runs.as_ref().map(|root| run::default_run_dir(root, cfg));
                let result = run::run(cfg, dir.as_deref(), |_, _| Ok(()))?;
                let m = &result.outcome.matrix;
                let t = m.tasks();
                Ok((
                    *p,
                    RunScore {
                        seed: *seed,
                        run_id: result.manifest.run_id,
                        average_accuracy: m.average_accuracy(t)?,
                        forgetting: if t >= 2 { Some(m.forgetting(t)?) } else { None },
                    },
                ))
            })
            .collect::<Result<_>>()
    })?;
    let rows: Vec<Aggregate> = points
        .iter()
        .enumerate()
        .map(|(p, point)| {
            let runs: Vec<RunScore> = scores.iter().filter(|(q, _)| *q == p).map(|(_, s)| s.clone()).collect();
            let acc: Vec<f64> = runs.iter().map(|r| r.average_accuracy).collect();
            let fgt: Vec<f64> = runs.iter().filter_map(|r| r.forgetting).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (forgetting_mean, forgetting_std) = if fgt.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&fgt);
                (Some(m), Some(s))
            };
            Aggregate {
                point: point.clone(),
                runs,
                accuracy_mean,
                accuracy_std,
                forgetting_mean,
                forgetting_std,
            }
        })
        .collect();
    let csv = aggregate_csv(&keys, &rows);
    std::fs::write(&args.out, &csv).with_context(|| format!("writing {}", args.out.display()))?;
    if args.json {
        print_json(&json!({"out": args.out, "keys": keys, "runs": jobs.len(), "rows": rows}));
    } else {
        print!("{csv}");
        eprintln!("{} runs, {} rows -> {}", jobs.len(), rows.len(), args.out.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_sorted_by_key_then_numeric_value() {
        let pts = grid_points(&["train.lambda=1,0.1,0.01".into(), "model.codes=64,32".into()]).unwrap();
        assert_eq!(pts.len(), 6);
        let flat: Vec<String> = pts.iter().map(|p| format!("{}|{}", p[0].1, p[1].1)).collect();
        assert_eq!(flat, ["32|0.01", "32|0.1", "32|1", "64|0.01", "64|0.1", "64|1"]);
        assert_eq!(pts[0][0].0, "model.codes");
        assert_eq!(pts[0][1].0, "train.lambda");
    }

    #[test]
    fn malformed_axes_are_rejected() {
        assert!(grid_points(&["train.lambda".into()]).is_err());
        assert!(grid_points(&["train.lambda=".into()]).is_err());
        assert!(grid_points(&["a=1".into(), "a=2".into()]).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.2, 0.4]);
        assert!((m - 0.3).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
    }
}
