//! Central-difference gradient checking.
//!
//! The reported error is `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
//! `f` must be deterministic; nondeterminism is not detected and simply
//! yields a meaningless error figure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{backward, Tape, Var};
use crate::tensor::Tensor;

/// Maximum relative error between the tape gradient of `f` at `x` and its
/// central finite-difference estimate with step `h`.
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> std::result::Result<Var<'t>, E>,
    E: std::fmt::Display,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(TensorError::Contract(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = call(&f, &tape, v)?;
        let grads = backward(out)?;
        grads
            .wrt(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
    };
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        Ok(call(&f, &tape, v)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn call<'t, F, E>(f: &F, tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>>
where
    F: for<'a> Fn(&'a Tape, Var<'a>) -> std::result::Result<Var<'a>, E>,
    E: std::fmt::Display,
{
    f(tape, v).map_err(|e| TensorError::Contract(e.to_string()))
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Runs [`grad_check`] on every differentiable primitive with seeded inputs
/// drawn from `[-2, 2]` (positive inputs for `sqrt`). Each primitive output
/// is contracted against a fixed random weight so the upstream gradient is
/// not all ones.
pub fn primitive_battery(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |name: &str, x: Tensor, f: &dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>| {
        let err = grad_check(f, &x, STEP).unwrap_or(f64::INFINITY);
        reports.push(CheckReport {
            name: name.to_string(),
            max_rel_error: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
    };

    // Weighted readout: sum(y ⊙ w) for a fixed random w of y's shape.
    fn readout<'t>(tape: &'t Tape, y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
        let w = tape.constant(w.clone());
        y.mul(w)?.sum()
    }

    let x34 = uniform(&mut rng, 3, 4, -2.0, 2.0);
    let b45 = uniform(&mut rng, 4, 5, -2.0, 2.0);
    let w35 = uniform(&mut rng, 3, 5, -2.0, 2.0);
    let w34 = uniform(&mut rng, 3, 4, -2.0, 2.0);
    let w43 = uniform(&mut rng, 4, 3, -2.0, 2.0);
    let other34 = uniform(&mut rng, 3, 4, -2.0, 2.0);
    let away34 = uniform(&mut rng, 3, 4, 0.5, 2.0);
    let row4 = uniform(&mut rng, 1, 4, -2.0, 2.0);
    let col3 = uniform(&mut rng, 3, 1, -2.0, 2.0);
    let w31 = uniform(&mut rng, 3, 1, -2.0, 2.0);
    let w62 = uniform(&mut rng, 6, 2, -2.0, 2.0);
    let w54 = uniform(&mut rng, 5, 4, -2.0, 2.0);
    let w32 = uniform(&mut rng, 3, 2, -2.0, 2.0);

    run("matmul_left", x34.clone(), &|t, x| {
        let b = t.constant(b45.clone());
        readout(t, x.matmul(b)?, &w35)
    });
    run("matmul_right", b45.clone(), &|t, b| {
        let a = t.constant(x34.clone());
        readout(t, a.matmul(b)?, &w35)
    });
    run("transpose", x34.clone(), &|t, x| readout(t, x.t()?, &w43));
    run("add", x34.clone(), &|t, x| {
        let o = t.constant(other34.clone());
        readout(t, x.add(o)?, &w34)
    });
    run("sub", x34.clone(), &|t, x| {
        let o = t.constant(other34.clone());
        readout(t, o.sub(x)?, &w34)
    });
    run("mul", x34.clone(), &|t, x| {
        let o = t.constant(other34.clone());
        readout(t, x.mul(o)?, &w34)
    });
    run("div_numerator", x34.clone(), &|t, x| {
        let o = t.constant(away34.clone());
        readout(t, x.div(o)?, &w34)
    });
    run("div_denominator", away34.clone(), &|t, x| {
        let o = t.constant(other34.clone());
        readout(t, o.div(x)?, &w34)
    });
    run("add_row", row4.clone(), &|t, r| {
        let a = t.constant(x34.clone());
        readout(t, a.add_row(r)?, &w34)
    });
    run("mul_row", row4.clone(), &|t, r| {
        let a = t.variable(x34.clone());
        readout(t, a.mul_row(r)?, &w34)
    });
    run("mul_row_matrix", x34.clone(), &|t, x| {
        let r = t.constant(row4.clone());
        readout(t, x.mul_row(r)?, &w34)
    });
    run("mul_col", col3.clone(), &|t, c| {
        let a = t.constant(x34.clone());
        readout(t, a.mul_col(c)?, &w34)
    });
    run("mul_col_matrix", x34.clone(), &|t, x| {
        let c = t.constant(col3.clone());
        readout(t, x.mul_col(c)?, &w34)
    });
    run("expand", Tensor::scalar(0.7), &|t, s| readout(t, s.expand(3, 4)?, &w34));
    run("scale", x34.clone(), &|t, x| readout(t, x.scale(-1.7)?, &w34));
    run("offset", x34.clone(), &|t, x| readout(t, x.offset(0.3)?, &w34));
    run("sigmoid", x34.clone(), &|t, x| readout(t, x.sigmoid()?, &w34));
    run("gelu", x34.clone(), &|t, x| readout(t, x.gelu()?, &w34));
    run("sqrt", away34.clone(), &|t, x| readout(t, x.sqrt()?, &w34));
    run("softmax_rows", x34.clone(), &|t, x| readout(t, x.softmax_rows()?, &w34));
    run("layer_norm_rows", x34.clone(), &|t, x| {
        readout(t, x.layer_norm_rows(1e-5)?, &w34)
    });
    run("concat_rows", x34.clone(), &|t, x| {
        let o = t.constant(Tensor::from_fn(2, 4, |r, c| (r + c) as f64 * 0.1));
        readout(t, t.concat_rows(&[o, x])?, &w54)
    });
    run("slice_rows", x34.clone(), &|t, x| {
        readout(t, x.slice_rows(1, 3)?, &w34.slice_rows(0, 2).expect("rows"))
    });
    run("slice_cols", x34.clone(), &|t, x| readout(t, x.slice_cols(1, 3)?, &w32));
    run("gather_rows", x34.clone(), &|t, x| {
        let g = x.gather_rows(&[2, 0, 2])?;
        readout(t, g, &w34)
    });
    run("reshape", x34.clone(), &|t, x| readout(t, x.reshape(6, 2)?, &w62));
    run("sum", x34.clone(), &|_, x| x.sum());
    run("mean", x34.clone(), &|t, x| readout(t, x.scale(2.0)?.mean()?.expand(1, 1)?, &Tensor::scalar(1.3)));
    run("sum_rows", x34.clone(), &|t, x| readout(t, x.sum_rows()?, &w31));
    run("frob_sq", x34.clone(), &|_, x| x.frob_sq());
    run("cross_entropy", x34.clone(), &|_, x| x.cross_entropy(&[0, 3, 1]));
    run("min", x34.clone(), &|t, x| readout(t, x.sigmoid()?.min()?, &Tensor::scalar(0.9)));
    run("max", x34.clone(), &|t, x| readout(t, x.sigmoid()?.max()?, &Tensor::scalar(0.9)));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::{self, Fault};

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(3, 3, |r, c| r as f64 - c as f64 * 0.5);
        let err = grad_check(|_, v| v.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|_, v| v.sum(), &x, 1e-2).is_err());
    }

    #[test]
    fn battery_passes() {
        for report in primitive_battery(7) {
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn battery_catches_sigmoid_sign_flip() {
        fault::inject(Fault::SigmoidBackwardSign);
        let reports = primitive_battery(7);
        fault::clear();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"sigmoid"), "{failed:?}");
    }
}
