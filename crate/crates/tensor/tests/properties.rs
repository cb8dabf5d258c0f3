use pcl_tensor::{grad_check, Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_ignore_shift(x in matrix(3, 5), shift in -50.0f64..50.0) {
        let tape = Tape::new();
        let y = tape.constant(x.clone()).softmax_rows().unwrap().value();
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
        let shifted = tape.constant(x.map(|v| v + shift)).softmax_rows().unwrap().value();
        prop_assert!(shifted.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn cross_entropy_is_nonnegative(x in matrix(4, 6), labels in prop::collection::vec(0usize..6, 4)) {
        let tape = Tape::new();
        let loss = tape.constant(x).cross_entropy(&labels).unwrap().item();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes(c in 2usize..20, k in -3.0f64..3.0) {
        let tape = Tape::new();
        let loss = tape.constant(Tensor::full(2, c, k)).cross_entropy(&[0, c - 1]).unwrap().item();
        prop_assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_is_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn composite_gradients_match_finite_differences(x in matrix(3, 4), w in matrix(4, 4)) {
        let err = grad_check(
            |t, v| {
                let w = t.constant(w.clone());
                let h = v.layer_norm_rows(1e-5)?.matmul(w)?.gelu()?;
                let att = h.matmul(h.t()?)?.softmax_rows()?;
                att.matmul(v)?.sigmoid()?.frob_sq()
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{}", err);
    }
}
