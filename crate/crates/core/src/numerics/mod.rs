//! Dense NCHW tensor engine with the forward and backward passes needed by
//! the segmentation networks, plus a finite-difference gradient checker.

mod activation;
mod conv;
pub mod gradcheck;
mod loss;
mod rng;
mod tensor;

pub use activation::{elu, elu_backward, spatial_dropout, spatial_dropout_backward, DropoutMask};
pub use conv::{
    conv2d, conv2d_backward, conv_forward, transposed_conv2d, ConvGeometry, ConvGrads, ConvKind,
    ConvParams, ConvState,
};
pub use gradcheck::{
    gradient_check, gradient_check_with, Differentiable, GradCheckOptions, GradCheckReport, Stencil,
};
pub use loss::{class_probability, softmax_cross_entropy, LabelMap};
pub use rng::RngState;
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor of shape {shape} needs {expected} values, got {actual}")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("channel mismatch: expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("requested {requested} channels from a tensor with {available}")]
    ChannelOutOfRange { requested: usize, available: usize },
    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),
    #[error("stale forward state: {0}")]
    StaleState(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("loss is undefined: every pixel is ignored")]
    UndefinedLoss,
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: u8, classes: usize },
}
