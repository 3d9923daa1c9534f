//! Dense tensors, a reverse-mode tape, attention, and finite-difference checks.

mod attention;
mod gradcheck;
mod tape;
pub(crate) mod tensor;

pub use attention::{mhsa_forward, AttentionVars};
pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport, RELATIVE_FLOOR};
pub use tape::{Grads, Tape, Var};
pub use tensor::{softmax_axis, Tensor};
