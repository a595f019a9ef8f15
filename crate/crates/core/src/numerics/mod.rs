//! Dense tensors, parameter storage and the reverse-mode tape.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, HeadLayout, Rotation, Tape, Var};
pub use tensor::Tensor;
