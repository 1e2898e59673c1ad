//! The 21-layer fully convolutional network and its fusion variants.

pub mod checkpoint;
mod fusion;
mod layer;
pub mod spec;

pub use fusion::{
    Branch, CrossScalars, FusionMode, FusionNetwork, Gradients, LabeledBatch, NetworkInput,
    ParamRole, Tape,
};
pub use layer::{Layer, LayerTape};
pub use spec::{receptive_field, ChannelPlan, LayerKind, LayerSpec, NetworkSpec};

use thiserror::Error;

use crate::numerics::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network spec at layer {layer}: {reason}")]
    InvalidSpec { layer: usize, reason: String },
    #[error("unknown fusion mode {0:?}")]
    UnknownMode(String),
    #[error("missing {0} input")]
    MissingModality(&'static str),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}
