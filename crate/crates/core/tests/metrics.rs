use pcl_core::metrics::{format_percent, parse_percent, AccuracyMatrix};
use proptest::prelude::*;

const CIFAR: &str = include_str!("../fixtures/coda_cifar.csv");
const IMR: &str = include_str!("../fixtures/coda_imr.csv");

/// Rows of percent values read with plain string splitting.
fn raw_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').skip(1).filter(|c| !c.is_empty()).map(|c| c.parse().unwrap()).collect())
        .collect()
}

/// Final-stage average accuracy and forgetting, in percent, by direct
/// summation.
fn oracle(rows: &[Vec<f64>]) -> (f64, f64) {
    let t = rows.len();
    let last = &rows[t - 1];
    let a = last.iter().sum::<f64>() / t as f64;
    let mut f = 0.0;
    for j in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for row in &rows[j..t - 1] {
            best = best.max(row[j]);
        }
        f += best - last[j];
    }
    (a, f / (t - 1) as f64)
}

#[test]
fn published_matrices_reproduce_reported_scores() {
    for (text, want_a, want_f) in [(CIFAR, 86.41, 7.17), (IMR, 74.26, 7.91)] {
        let m = AccuracyMatrix::from_csv(text).unwrap();
        assert_eq!((m.tasks(), m.stages()), (10, 10));
        let a = 100.0 * m.average_accuracy(10).unwrap();
        let f = 100.0 * m.forgetting(10).unwrap();
        assert!((a - want_a).abs() <= 0.05, "A_a(10) = {a}");
        assert!((f - want_f).abs() <= 0.05, "F(10) = {f}");
        let (oa, of) = oracle(&raw_rows(text));
        assert!((a - oa).abs() < 1e-9 && (f - of).abs() < 1e-9);
    }
}

#[test]
fn fixture_text_survives_a_round_trip() {
    for text in [CIFAR, IMR] {
        let m = AccuracyMatrix::from_csv(text).unwrap();
        assert_eq!(AccuracyMatrix::from_csv(&m.to_csv()).unwrap(), m);
    }
}

fn lower_triangular(max_t: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    entries_in(max_t, 0.0, 1.0)
}

fn entries_in(max_t: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_t).prop_flat_map(move |t| {
        (1..=t)
            .map(|i| prop::collection::vec(lo..=hi, i))
            .collect::<Vec<_>>()
    })
}

proptest! {
    #[test]
    fn scores_stay_in_range(rows in lower_triangular(8)) {
        let t = rows.len();
        let m = AccuracyMatrix::from_rows(t, rows).unwrap();
        for s in 1..=t {
            let a = m.average_accuracy(s).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            if s >= 2 {
                let f = m.forgetting(s).unwrap();
                prop_assert!((-1.0..=1.0).contains(&f));
                prop_assert!(m.task_forgetting(s).unwrap().len() == s - 1);
            }
        }
    }

    #[test]
    fn uniform_offset_shifts_accuracy_but_not_forgetting(rows in entries_in(7, 0.25, 0.75), c in -0.25f64..0.25) {
        let t = rows.len();
        prop_assume!(t >= 2);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        let m = AccuracyMatrix::from_rows(t, rows).unwrap();
        let s = AccuracyMatrix::from_rows(t, shifted).unwrap();
        prop_assert!((s.average_accuracy(t).unwrap() - m.average_accuracy(t).unwrap() - c).abs() < 1e-12);
        prop_assert!((s.forgetting(t).unwrap() - m.forgetting(t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn decaying_columns_forget_from_their_diagonal(rows in lower_triangular(7)) {
        let t = rows.len();
        prop_assume!(t >= 2);
        // Make every column nonincreasing down the stages.
        let mut decayed = rows.clone();
        for i in 1..t {
            for j in 0..i {
                decayed[i][j] = decayed[i][j].min(decayed[i - 1][j]);
            }
        }
        let m = AccuracyMatrix::from_rows(t, decayed.clone()).unwrap();
        let want: f64 = (0..t - 1).map(|j| decayed[j][j] - decayed[t - 1][j]).sum::<f64>() / (t - 1) as f64;
        prop_assert!((m.forgetting(t).unwrap() - want).abs() < 1e-12);
        prop_assert!(m.forgetting(t).unwrap() >= 0.0);
    }

    #[test]
    fn csv_keeps_every_bit(rows in lower_triangular(6)) {
        let t = rows.len();
        let m = AccuracyMatrix::from_rows(t, rows).unwrap();
        prop_assert_eq!(AccuracyMatrix::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn percent_text_is_exact(v in -2.0f64..2.0) {
        prop_assert_eq!(parse_percent(&format_percent(v)), Some(v));
    }
}
