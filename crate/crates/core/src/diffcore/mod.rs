//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitives as they are evaluated; [`Tape::backward`]
//! walks the record once in reverse. Model parameters live in a
//! [`ParameterStore`] and are bound onto a fresh tape per evaluation.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Manifest,
    FORMAT_VERSION, MAGIC,
};
pub use gradcheck::{
    analytic_gradient, central_difference, gradient_check, gradient_check_subset,
    max_relative_error, relative_error, GradCheckReport,
};
pub use params::{accumulate, scale_grads, AdamConfig, BoundParams, ParamEntry, ParameterStore};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

