//! Few-shot multi-speaker, multi-dialect text-to-speech on a procedurally
//! generated corpus.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod synthcorpus;
pub mod training;

pub use error::{Error, Result};
