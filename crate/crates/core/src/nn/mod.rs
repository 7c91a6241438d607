//! A small CPU neural-network engine: channel-last tensors, layers with
//! hand-written backward passes, softmax cross-entropy and ADAM.

mod adam;
mod gradcheck;
mod layers;
mod loss;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{
    central_difference, grad_check, relative_error, Differentiable, GradCheckOptions, GradCheckReport, DEFAULT_STEP,
};
pub use layers::{dropout, relu, Cache, Conv, Dense, ForwardCtx, Layer, LayerSpec, MaxPool, Mode, Padding, Stack};
pub use loss::{softmax, softmax_cross_entropy, CrossEntropy};
pub use tensor::{concat, split_grad, Parameter, Tensor};
