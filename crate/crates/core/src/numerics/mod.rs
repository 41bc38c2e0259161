//! Dense-tensor arithmetic, convolution, activations, optimizers, and the
//! seeded random streams the rest of the pipeline is built on.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod io;
pub mod ops;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use conv::{conv2d, conv2d_backward};
pub use ops::{cross_entropy_with_grad, l2_normalize, softmax};
pub use rng::RngStream;
pub use tensor::Tensor;
