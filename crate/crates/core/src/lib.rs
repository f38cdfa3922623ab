//! Conditional DCGAN toolkit with a dual-branch discriminator.
//!
//! The discriminator pairs the usual per-sample convolutional critic with a
//! second, much smaller branch that convolves the entire minibatch as one 3D
//! volume. A learned attention layer turns the two branch scores into
//! per-sample weights, so the batch-level critic can dominate when generated
//! batches turn homogeneous (mode collapse) and fade out when training is
//! healthy. The crate ships the models, a deterministic training loop with
//! resumable checkpoints, the paired-digit dataset pipeline, and diagnostics
//! that quantify collapse and condition adherence.

pub mod condition;
pub mod dataset;
pub mod diagnostics;
pub mod discriminator;
pub mod generator;
pub mod idx;
pub mod nn;
pub mod training;

pub use condition::{ConditionSchema, ConditionVector, SchemaError};
pub use dataset::{ComposedSample, DatasetError, LabeledBatch, PairedDataset};
pub use diagnostics::{DiagnosticsError, DiagnosticsReport, DigitClassifier};
pub use discriminator::{BatchVolume, Discriminator, DiscriminatorConfig, DiscriminatorOutput};
pub use generator::{Generator, GeneratorConfig};
pub use training::{Checkpoint, StepTelemetry, TrainConfig, TrainError, Trainer};
