//! Data-free quantization of small classifiers by class-conditional
//! feature-distribution alignment.
//!
//! A pre-trained full-precision classifier is quantized without its
//! training data: a class-conditional generator is trained to match the
//! teacher's batch-normalization statistics globally and per class
//! (against EMA-maintained centroids), and the quantized model is
//! fine-tuned by distillation on the synthetic data.
//!
//! The numeric core is generic over [`scalar::Scalar`]; training and
//! the command-line tools use [`Real`] (`f64`).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod quantizer;
pub mod scalar;
pub mod stats;

pub use error::{DfqError, Result};
pub use scalar::Scalar;

/// The scalar type used by training, the CLI, and the acceptance suite.
pub type Real = f64;

/// Concrete model aliases at the working precision.
pub type Model = nn::ModelGraph<Real>;
pub type Generator = nn::GeneratorGraph<Real>;
pub type QuantModel = nn::FakeQuantModel<Real>;
pub type Dataset = data::LabeledDataset<Real>;
