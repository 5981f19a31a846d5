//! Dense tensors, a recording tape for reverse-mode gradients, a seeded
//! counter-based RNG, named parameter sets with a compact binary format and
//! an Adam optimizer. Sized for small convolutional networks on CPU.

mod error;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod ops;
mod optim;
mod param;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig};
pub use param::{Bound, ParamSet, Parameter};
pub use rng::Rng;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Real, Tensor};
