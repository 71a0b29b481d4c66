//! Multi-scale pyramid pooling of dense convolutional activations.
//!
//! The pipeline turns an image and a small convolutional network into a
//! pooled Fisher-vector representation:
//!
//! 1. [`convnet`] rewrites fully-connected layers as convolutions so a single
//!    forward pass over a large image yields one activation vector per patch.
//! 2. [`pyramid`] runs that pass over every level of a scale pyramid.
//! 3. [`pca`] and [`gmm`] learn the reduced space and the visual vocabulary.
//! 4. [`fisher`] encodes descriptor sets, [`pooling`] merges the scales.
//! 5. [`svm`] trains one-vs-rest linear classifiers and [`confmap`] traces
//!    their scores back to image patches.
//!
//! [`harness`] wires the stages together with configuration, synthetic
//! datasets and evaluation metrics ([`metrics`]).

pub mod binio;
pub mod confmap;
pub mod convnet;
pub mod error;
pub mod fisher;
pub mod gmm;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod pca;
pub mod pooling;
pub mod pyramid;
pub mod reduce;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
