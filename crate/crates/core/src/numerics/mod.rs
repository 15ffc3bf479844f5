//! Dense linear algebra, reverse-mode autodiff, Adam and gradient checking.

mod adam;
mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use ops::{argmax, attention, cross_entropy, linear, masked_softmax};
pub use params::{xavier_uniform, Gradients, ParameterStore, Session};
pub(crate) use params::Fnv64;
pub use tape::{ensure_finite, Tape, TapeGrads, Var};
pub use tensor::Tensor2D;
