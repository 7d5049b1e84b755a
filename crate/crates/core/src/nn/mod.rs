//! Minimal convolutional network with hand-written backpropagation.

mod encoder;
mod layers;

pub use encoder::{ConvSpec, Encoder, EncoderSpec, EncoderTrace, InputNorm, HEAD_LAYER};
pub use layers::{relu_backward_in_place, relu_in_place, Conv2d, Linear, Mlp, MlpBatchTrace, MlpTrace};
