//! Object classification pipeline: image pre-processing, entropy-based
//! multilevel thresholding, a small convolutional classifier trained by
//! backpropagation, and a whale optimization search over the classifier's
//! structural hyperparameters.

pub mod imagecore;
pub mod micronet;
pub mod pipeline;
pub mod preprocess;
pub mod segmentation;
pub mod woa;
