//! Dense tensors, tape-based reverse-mode autodiff, layers, optimizer,
//! finite-difference gradient checking and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use rng::{Domain, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, l2_normalize, softmax, Real, Tensor};
