//! Differentiable model substrate: layers, classifier and generator
//! graphs, fake-quantized wrapping, and teacher training.

pub mod fakequant;
pub mod generator;
pub mod init;
pub mod layers;
pub mod model;
pub mod optim;
pub mod train;

pub use fakequant::{quantize_model, FakeQuantModel};
pub use generator::{build_generator, GeneratorGraph, Normalization, SyntheticBatch};
pub use layers::BnMode;
pub use model::{build_classifier, Block, Layer, ModelGraph};
pub use train::{accuracy, train_teacher, TeacherSchedule};
