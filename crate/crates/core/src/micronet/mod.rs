//! A small convolutional classifier with hand-written backpropagation.
//!
//! Each of `conv_blocks` blocks runs convolution (stride 1), batch
//! normalization, the rectifier and 2x2 pooling. The pooled features are
//! flattened into an optional rectified hidden layer and a fully connected
//! output layer with a per-class logistic. Training minimizes the mean
//! binary cross-entropy with plain mini-batch gradient descent. Everything
//! is `f64`.

pub mod checkpoint;
pub mod layers;
pub mod network;
mod tensor;
pub mod train;

use thiserror::Error;

pub use layers::{
    bce_loss, conv2d_forward, conv2d_linear, dense_logistic_forward, mrelu, pool_forward, BatchNorm, Mode, Padding,
    PoolKind,
};
pub use network::{argmax, ActivationPattern, Gradients, LayerParams, Network, NetworkSpec};
pub use tensor::Tensor;
pub use train::{train, Example, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("kernel {kernel:?} larger than input {input:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    #[error("pooling window {window:?} larger than input {input:?}")]
    WindowTooLarge {
        window: (usize, usize),
        input: (usize, usize),
    },
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<NetError>,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class {0} has no training samples")]
    MissingClass(usize),
    #[error("example {index} has label {label} but there are {classes} classes")]
    Label { index: usize, label: usize, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl NetError {
    pub fn at_layer(index: usize, source: NetError) -> NetError {
        NetError::Layer {
            index,
            source: Box::new(source),
        }
    }
}
