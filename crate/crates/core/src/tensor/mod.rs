//! Dense-tensor arithmetic with reverse-mode differentiation, plus the
//! finite-difference verification harness.

mod gradcheck;
mod param;
mod scalar;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_params, max_rel_error};
pub use param::{Param, ParamGroup, ParamId, ParamStore, Session};
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, TensorId};
