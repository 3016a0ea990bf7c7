//! Dense tensors, 3D convolution kernels, a reverse-mode tape and Adam.

mod adam;
pub mod checkpoint;
mod layers;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{conv3d, conv_transpose3d, linear, LayerKind, LayerSpec};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
