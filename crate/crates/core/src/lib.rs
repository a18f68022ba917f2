//! Gradient synthesis for machine unlearning on a small next-token model.
//!
//! A forget gradient and a retain gradient are merged into one update by a
//! combiner: a weighted sum, PCGrad projection (global or per module), or
//! SAGO sign gating. The crate also provides the unlearning objectives, a
//! tiny feed-forward language model with exact gradients, a synthetic
//! fact corpus and the training and evaluation harness.

pub mod combiners;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod report;

pub use combiners::{combine, CombineOutcome, CombinerConfig, CombinerKind, ProjectionScope, ZeroProductPolicy};
pub use data::{CorpusSpec, Dataset};
pub use error::{Error, Result};
pub use gradcore::{GradVector, ModuleGradients};
pub use harness::{evaluate, unlearn, StepLog, UnlearnConfig};
pub use model::{ModelDims, NextTokenModel, TinyLM, TokenSequence};
pub use objectives::{compute_loss, LossContext, LossKind, ObjectiveParams};
