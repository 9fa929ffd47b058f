//! Minimal reverse-mode automatic differentiation used by the model.

mod tape;
mod tensor;

pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
