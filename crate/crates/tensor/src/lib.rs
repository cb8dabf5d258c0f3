//! Dense `f64` matrices with tape-based reverse-mode differentiation and a
//! central-difference gradient checker.

mod error;
pub mod fault;
pub mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, primitive_battery, CheckReport};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{backward, softmax_rows, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
