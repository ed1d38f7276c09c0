//! Tensor arithmetic, reverse-mode differentiation, parameters, RNG,
//! gradient checking, checkpoints and the optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, GradcheckReport};
pub use optim::AdamW;
pub use params::{BoundParams, Param, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
