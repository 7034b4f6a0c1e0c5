//! Guided training of a GCN+CTC sequence recognizer.
//!
//! A shared convolutional encoder turns a text-line image into a feature
//! sequence. An attention decoder trained with cross entropy owns the
//! encoder's gradients; a graph-convolution + BiLSTM + CTC decoder learns on
//! detached copies of the same features and is the only head used at
//! inference.
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below pin the `f64` instantiation used by the trainer and CLI.

pub mod ctc;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gcn;
pub mod guidance;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Adam = tensor::Adam<f64>;
pub type ProbSequence = ctc::ProbSequence<f64>;
pub type FeatureSequence = gcn::FeatureSequence<f64>;
pub type Model = trainer::Model<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
