//! Dense tensors, a reverse-mode tape, parameter storage and a finite-difference
//! gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use params::{clip_global_norm, BoundParams, LazyParams, NamedVars, ParamSource, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
