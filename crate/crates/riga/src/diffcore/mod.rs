//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything learnable in the pipeline (encoders, attention, projection
//! heads, the Sinkhorn slack) is expressed through these primitives, so a
//! single tape records the whole loss and `backward` yields exact
//! gradients.

mod check;
mod store;
mod tape;
pub(crate) mod tensor;

pub use check::{gradient_check, gradient_check_sampled, LossFn};
pub use store::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
