//! Minimal reverse-mode differentiation and optimisation.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{sigmoid, Tape, Var, PROB_MAX, PROB_MIN};
pub use tensor::Tensor;

