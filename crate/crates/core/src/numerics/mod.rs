//! Tensor substrate: values, kernels, the differentiation tape, parameters,
//! the optimizer and the finite-difference oracle.

pub mod gradcheck;
pub(crate) mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{adamw_step, cosine_lr, AdamW, AdamWConfig};
pub use params::{Bindings, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
