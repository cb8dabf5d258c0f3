use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = [
    "--set",
    "stream.tasks=2",
    "--set",
    "stream.train_per_class=4",
    "--set",
    "stream.test_per_class=2",
];

fn pcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcl")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let out = pcl(&["train", "--mode", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn bad_override_key_is_a_usage_error() {
    let out = pcl(&["train", "--set", "train.no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn malformed_matrix_names_the_offending_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "task,eval_1,eval_2\n1,50.0,\n2,abc,40\n").unwrap();
    let out = pcl(&["metrics", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn metrics_prints_a_stage_table() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/coda_cifar.csv");
    let out = pcl(&["metrics", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let last: Vec<f64> = text.lines().last().unwrap().split_whitespace().map(|c| c.parse().unwrap()).collect();
    assert_eq!(last[0], 10.0);
    assert!((last[1] - 86.41).abs() <= 0.05 && (last[2] - 7.17).abs() <= 0.05, "{text}");
}

#[test]
fn train_then_export_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--mode", "pc", "--seed", "3", "--out", run.to_str().unwrap()];
    args.extend(SMALL);
    let out = pcl(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["config.json", "matrix.csv", "summary.json", "checkpoint/params.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let csv = dir.path().join("prompts.csv");
    let out = pcl(&["export-prompts", "--run", run.to_str().unwrap(), "--out", csv.to_str().unwrap(), "--limit", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("task,sample,label,block,kind,row,col,value"));
    let kinds: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(kinds.into_iter().collect::<Vec<_>>(), ["coefficient", "prompt", "weight"]);
}

#[test]
fn sweep_aggregates_each_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let mut args = vec![
        "sweep",
        "--mode",
        "frozen_baseline",
        "--grid",
        "train.lr=0.01,0.001",
        "--seeds",
        "0,1",
        "--out",
        csv.to_str().unwrap(),
    ];
    args.extend(SMALL);
    let out = pcl(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows[0].starts_with("train.lr,seeds,accuracy_mean,accuracy_std"));
    assert!(rows[1].starts_with("0.001,") && rows[2].starts_with("0.01,"));
}
