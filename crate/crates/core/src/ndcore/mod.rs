//! Minimal dense tensor and reverse-mode tape: 3D convolution, SiLU, linear
//! maps, row softmax, softmax cross-entropy and summed squared error, each
//! with an analytic backward pass. Double precision, single-threaded.

pub mod check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamW, Optimizer, Sgd};
pub use params::{ParamId, ParamStore};
pub use tape::{conv3d_forward, sigmoid, Conv3dSpec, Grads, Tape, Var};
pub use tensor::Tensor;
