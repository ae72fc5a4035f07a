//! Reverse-mode differentiation substrate: tensors, the tape, dense layers and Adam.

mod adam;
mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use nn::{Activation, Dense, Mlp};
pub use params::{Gradients, NamedTensor, ParamId, ParamSet};
pub use tape::{Adjoints, Tape, Var};
pub use tensor::Tensor;
