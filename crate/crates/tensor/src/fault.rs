//! Deliberate gradient faults for mutation-testing the gradient checker.
//!
//! Faults are thread-local so a test that enables one cannot disturb
//! tests running on other threads.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the sigmoid backward rule.
    SigmoidBackwardSign,
}

thread_local! {
    static SIGMOID_SIGN: Cell<f64> = const { Cell::new(1.0) };
}

pub fn inject(fault: Fault) {
    match fault {
        Fault::SigmoidBackwardSign => SIGMOID_SIGN.with(|s| s.set(-1.0)),
    }
}

pub fn clear() {
    SIGMOID_SIGN.with(|s| s.set(1.0));
}

pub(crate) fn sigmoid_backward_sign() -> f64 {
    SIGMOID_SIGN.with(|s| s.get())
}
