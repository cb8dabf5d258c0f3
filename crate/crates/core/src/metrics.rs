//! Accuracy matrix, average accuracy and forgetting.
//!
//! Entries are stored as fractions in `[0, 1]`. The CSV form uses percent:
//! header `task,eval_1,…,eval_T`, one row per stage, cells right of the
//! diagonal left blank.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("stage {stage} expects {expected} accuracies, got {got}")]
    Arity {
        stage: usize,
        expected: usize,
        got: usize,
    },
    #[error("accuracy {value} at stage {stage}, task {task} is outside [0, 1]")]
    Range { stage: usize, task: usize, value: f64 },
    #[error("stage {stage} is not recorded (matrix has {recorded} of {tasks} stages)")]
    MissingStage {
        stage: usize,
        recorded: usize,
        tasks: usize,
    },
    #[error("forgetting needs stage >= 2, got {0}")]
    TooEarly(usize),
    #[error("matrix already holds all {0} stages")]
    Full(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds a matrix from fraction rows; row `t` (0-based) must hold
    /// `t + 1` values.
    pub fn from_rows(tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(tasks);
        for row in rows {
            m.record_eval(row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Number of recorded stages.
    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    /// Accuracy on task `j` after stage `t` (both 1-based).
    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(j.checked_sub(1)?).copied()
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t.checked_sub(1)?).map(Vec::as_slice)
    }

    /// Appends the next stage's row.
    pub fn record_eval(&mut self, accuracies: Vec<f64>) -> Result<()> {
        let stage = self.rows.len() + 1;
        if stage > self.tasks {
            return Err(MetricsError::Full(self.tasks));
        }
        if accuracies.len() != stage {
            return Err(MetricsError::Arity {
                stage,
                expected: stage,
                got: accuracies.len(),
            });
        }
        for (j, &value) in accuracies.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(MetricsError::Range {
                    stage,
                    task: j + 1,
                    value,
                });
            }
        }
        self.rows.push(accuracies);
        Ok(())
    }

    fn require(&self, t: usize) -> Result<&[f64]> {
        if t == 0 || t > self.rows.len() {
            return Err(MetricsError::MissingStage {
                stage: t,
                recorded: self.rows.len(),
                tasks: self.tasks,
            });
        }
        Ok(&self.rows[t - 1])
    }

    /// `A_a(t) = (1/t) Σ_j a[t][j]`.
    pub fn average_accuracy(&self, t: usize) -> Result<f64> {
        let row = self.require(t)?;
        Ok(row.iter().sum::<f64>() / t as f64)
    }

    /// Per-task forgetting `f_j^t = max_{i<t} a[i][j] − a[t][j]` for
    /// `j < t`.
    pub fn task_forgetting(&self, t: usize) -> Result<Vec<f64>> {
        if t < 2 {
            return Err(MetricsError::TooEarly(t));
        }
        let last = self.require(t)?;
        Ok((0..t - 1)
            .map(|j| {
                let best = self.rows[j..t - 1]
                    .iter()
                    .map(|r| r[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                best - last[j]
            })
            .collect())
    }

    /// `F_t`, the mean of [`task_forgetting`](Self::task_forgetting).
    pub fn forgetting(&self, t: usize) -> Result<f64> {
        let f = self.task_forgetting(t)?;
        Ok(f.iter().sum::<f64>() / f.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for j in 1..=self.tasks {
            write!(out, ",eval_{j}").expect("string write");
        }
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            write!(out, "{}", t + 1).expect("string write");
            for j in 0..self.tasks {
                out.push(',');
                if let Some(&v) = row.get(j) {
                    out.push_str(&format_percent(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| MetricsError::Parse { line, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"task") {
            return Err(parse_err(1, "header must start with `task`".into()));
        }
        let tasks = cols.len() - 1;
        for (j, name) in cols.iter().enumerate().skip(1) {
            if *name != format!("eval_{j}") {
                return Err(parse_err(1, format!("expected column eval_{j}, found `{name}`")));
            }
        }
        let mut m = Self::new(tasks);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != tasks + 1 {
                return Err(parse_err(
                    line_no,
                    format!("expected {} cells, found {}", tasks + 1, cells.len()),
                ));
            }
            let stage: usize = cells[0]
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad task index `{}`", cells[0])))?;
            if stage != m.stages() + 1 {
                return Err(parse_err(
                    line_no,
                    format!("expected task {}, found {stage}", m.stages() + 1),
                ));
            }
            let mut row = Vec::with_capacity(stage);
            for (j, cell) in cells[1..].iter().enumerate() {
                if j < stage {
                    let fraction = parse_percent(cell)
                        .ok_or_else(|| parse_err(line_no, format!("eval_{}: bad number `{cell}`", j + 1)))?;
                    row.push(fraction);
                } else if !cell.is_empty() {
                    return Err(parse_err(line_no, format!("eval_{} must be blank", j + 1)));
                }
            }
            m.record_eval(row).map_err(|e| parse_err(line_no, e.to_string()))?;
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_csv()).map_err(crate::error::io_err(path))
    }

    pub fn read_csv(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Ok(Self::from_csv(&text)?)
    }
}

/// Renders a fraction as a percent string with at least one decimal.
///
/// The shortest round-trip decimal form of `fraction` has its point moved
/// two places right, so [`parse_percent`] recovers the exact same `f64`.
pub fn format_percent(fraction: f64) -> String {
    let text = format!("{fraction}");
    let (sign, body) = match text.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", text.as_str()),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    let mut frac = frac.to_string();
    while frac.len() < 2 {
        frac.push('0');
    }
    let (moved, rest) = frac.split_at(2);
    let int = format!("{int}{moved}");
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let rest = if rest.is_empty() { "0" } else { rest };
    format!("{sign}{int}.{rest}")
}

/// Parses a percent string into a fraction by moving the decimal point two
/// places left before conversion.
pub fn parse_percent(text: &str) -> Option<f64> {
    let value: f64 = text.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    if text.contains(['e', 'E']) {
        return Some(value / 100.0);
    }
    let (sign, body) = match text.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", text.strip_prefix('+').unwrap_or(text)),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    let int = format!("{:0>2}", int);
    let (head, tail) = int.split_at(int.len() - 2);
    format!("{sign}{}.{tail}{frac}", if head.is_empty() { "0" } else { head })
        .parse()
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle(rows: &[&[f64]]) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(rows.len(), rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn constant_entries() {
        let m = triangle(&[&[0.7], &[0.7, 0.7], &[0.7, 0.7, 0.7]]);
        for t in 1..=3 {
            assert!((m.average_accuracy(t).unwrap() - 0.7).abs() < 1e-15);
        }
        assert_eq!(m.forgetting(3).unwrap(), 0.0);
    }

    #[test]
    fn monotone_columns_forget_from_diagonal() {
        let m = triangle(&[&[0.9], &[0.8, 0.95], &[0.6, 0.9, 0.85]]);
        let want = ((0.9 - 0.6) + (0.95 - 0.9)) / 2.0;
        assert!((m.forgetting(3).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn backward_transfer_is_negative_forgetting() {
        let m = triangle(&[&[0.5], &[0.7, 0.8]]);
        assert!((m.forgetting(2).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut m = AccuracyMatrix::new(3);
        assert!(matches!(m.record_eval(vec![]), Err(MetricsError::Arity { .. })));
        assert!(matches!(m.record_eval(vec![1.2]), Err(MetricsError::Range { .. })));
        m.record_eval(vec![0.5]).unwrap();
        assert!(matches!(m.forgetting(1), Err(MetricsError::TooEarly(1))));
        assert!(matches!(m.average_accuracy(2), Err(MetricsError::MissingStage { .. })));
        assert!(matches!(m.record_eval(vec![0.5]), Err(MetricsError::Arity { .. })));
    }

    #[test]
    fn malformed_row_names_line() {
        let text = "task,eval_1,eval_2\n1,50.0,\n2,40.0,abc\n";
        match AccuracyMatrix::from_csv(text) {
            Err(MetricsError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("eval_2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.5), "50.0");
        assert_eq!(format_percent(0.123), "12.3");
        assert_eq!(format_percent(1.0), "100.0");
        assert_eq!(format_percent(0.0), "0.0");
        assert_eq!(format_percent(0.007), "0.7");
        assert_eq!(parse_percent(&format_percent(1.0 / 3.0)), Some(1.0 / 3.0));
        assert_eq!(parse_percent("7.5"), Some(0.075));
        assert_eq!(parse_percent("abc"), None);
    }
}
