//! Horizontal pyramid matching for person re-identification.
//!
//! A small convolutional backbone produces feature maps that are sliced into
//! horizontal bins at several pyramid scales. Every bin is pooled (average,
//! max, or their sum), reduced with its own 1x1 convolution, and classified by
//! its own linear layer. At retrieval time the reduced bin vectors are
//! concatenated into a descriptor and ranked by squared Euclidean distance,
//! and the ranking is scored with CMC and mAP under the single-query protocol.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod hpp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
