//! Dense `f64` tensors, the activations and loss the network uses, a
//! reverse-mode tape, and Adam.

mod ops;
mod params;
mod tape;
mod tensor;

pub use ops::{
    bce_loss, bce_with_logits, linear, rowwise_max, selu, selu_scalar, sigmoid, BCE_EPS, SELU_ALPHA, SELU_LAMBDA,
};
pub use params::{Adam, NamedTensor, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
