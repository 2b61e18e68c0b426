//! Reverse-mode automatic differentiation over dense `f64` arrays.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod nn;
mod optim;
mod param;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::Adam;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Csr, Gradients, Pinhole, Rulebook, Tape, Var, MIN_DEPTH};
pub use tensor::Tensor;
