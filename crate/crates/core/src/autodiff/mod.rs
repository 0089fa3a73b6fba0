//! Dense tensors with reverse-mode differentiation, gradient checking and Adam.

mod adam;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_param, relative_error, GradCheckReport, FD_STEP};
pub use params::{Param, ParamEntry, ParamFile, ParamId, ParamStore, PARAM_FORMAT, PARAM_VERSION};
pub use tape::{log_sigmoid, sigmoid, CustomBackward, Gradients, Primitive, Tape, Var};

#[cfg(test)]
mod tests;
