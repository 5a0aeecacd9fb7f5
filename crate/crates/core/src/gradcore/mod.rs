//! Dense tensors, reverse-mode differentiation, and the optimizer with
//! freeze-mask support.

mod check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_at, GradCheckReport};
pub use optim::{adam_step, clip_grad_norm, AdamHyper, AdamState};
pub use params::{Bound, FreezePlan, Param, ParamGroup, ParamStore};
pub use tape::{lstm_step, Gradients, LstmWeights, Tape, Var};
pub use tensor::{Real, Tensor};
